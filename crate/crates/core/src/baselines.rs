//! Comparison systems: nearest-neighbor retrieval over embedded KB events and
//! a context-free sentence-level generator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Story;
use crate::kb::KnowledgeBase;
use crate::lm::{LmError, SentenceInferenceGenerator, TextEmbedder};
use crate::supervision::{model_candidates, Candidate, Source};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("embedder failed on `{text}`: {source}")]
    Embedder {
        text: String,
        #[source]
        source: LmError,
    },
    #[error("embedder returned {got} values, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedder returned a non-finite vector for `{0}`")]
    NonFinite(String),
    #[error("the index is empty")]
    EmptyIndex,
}

/// One vector per unique head event, in KB first-occurrence order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedIndex {
    pub events: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub embedder: String,
}

impl EmbeddedIndex {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Indices of the `k` most cosine-similar events; ties keep index order.
    pub fn nearest(&self, query: &[f64], k: usize) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (cosine(query, v), i))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, i)| i).collect()
    }
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn embed_checked(embedder: &dyn TextEmbedder, text: &str) -> Result<Vec<f64>, BaselineError> {
    let v = embedder.embed(text).map_err(|source| BaselineError::Embedder {
        text: text.to_string(),
        source,
    })?;
    if v.len() != embedder.dim() {
        return Err(BaselineError::Dimension {
            expected: embedder.dim(),
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(BaselineError::NonFinite(text.to_string()));
    }
    Ok(v)
}

pub fn build_index(kb: &KnowledgeBase, embedder: &dyn TextEmbedder) -> Result<EmbeddedIndex, BaselineError> {
    let events: Vec<String> = kb.events().iter().cloned().collect();
    let vectors = events
        .iter()
        .map(|e| embed_checked(embedder, e))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EmbeddedIndex {
        events,
        vectors,
        embedder: embedder.identity(),
    })
}

/// All non-"none" triples of the `k` nearest events, as candidates for
/// sentence `i` of `story`.
pub fn knn_inferences(
    story: &Story,
    i: usize,
    index: &EmbeddedIndex,
    kb: &KnowledgeBase,
    embedder: &dyn TextEmbedder,
    k: usize,
) -> Result<Vec<Candidate>, BaselineError> {
    if index.is_empty() {
        return Err(BaselineError::EmptyIndex);
    }
    let query = embed_checked(embedder, &story.sentences[i])?;
    let mut out = Vec::new();
    for (rank, event_idx) in index.nearest(&query, k).into_iter().enumerate() {
        let event = &index.events[event_idx];
        let similarity = cosine(&query, &index.vectors[event_idx]);
        for (_, triple) in kb.triples_with_head(event) {
            if triple.is_none_tail() {
                continue;
            }
            out.push(Candidate {
                story_id: story.id.clone(),
                sentence_idx: i,
                dimension: triple.dimension,
                inference: triple.tail.clone(),
                source: Source::Knn,
                match_score: Some(similarity),
                rank: Some(rank),
                coherence_ce: None,
            });
        }
    }
    Ok(out)
}

/// Runs the generator on every sentence independently, ignoring the rest of
/// the story. Returns the candidates and the number of failed dimensions.
pub fn sentence_level_generate(
    story: &Story,
    generator: &dyn SentenceInferenceGenerator,
    beam: usize,
) -> (Vec<Candidate>, usize) {
    let mut out = Vec::new();
    let mut failures = 0;
    for i in 0..story.len() {
        let (c, f) = model_candidates(story, i, generator, beam);
        out.extend(c);
        failures += f;
    }
    (out, failures)
}
