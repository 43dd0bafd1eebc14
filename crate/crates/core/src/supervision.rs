//! Silver supervision: sentence-level candidate inferences, filtered by how
//! coherent they are with the whole narrative.
//!
//! Candidates come either from KB events sharing a noun/verb phrase with a
//! sentence (ranked by ROUGE-1 F1) or from a sentence-level generator. Each
//! candidate is templated, inserted into the story right after its sentence
//! and scored by cross-entropy; the lowest-CE candidates per
//! (story, sentence, dimension) are kept.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunk::{normalize_phrase, PhraseChunker};
use crate::corpus::Story;
use crate::hashing::{config_hash, sha256_hex};
use crate::kb::{render_template, Dimension, DimensionGroup, KnowledgeBase};
use crate::lm::{SentenceInferenceGenerator, TextScorer};

pub const DEFAULT_TOP_N: usize = 10;
pub const DEFAULT_KEEP: usize = 5;
pub const DEFAULT_SCORING_BATCH: usize = 130;
pub const DEFAULT_GENERATOR_BEAM: usize = 10;

#[derive(Debug, Error)]
pub enum SupervisionError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed silver record at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mode `{0}` needs a sentence-level generator")]
    MissingGenerator(SupervisionMode),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Where a candidate inference came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Heuristic,
    Model,
    Knn,
}

/// A `(story, sentence, dimension, inference)` tuple plus its scores.
///
/// The inference is stored untemplated; templates are applied at scoring
/// and training time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub story_id: String,
    pub sentence_idx: usize,
    pub dimension: Dimension,
    pub inference: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default)]
    pub coherence_ce: Option<f64>,
}

impl Candidate {
    pub fn key(&self) -> (&str, usize, Dimension) {
        (&self.story_id, self.sentence_idx, self.dimension)
    }
}

/// Lowercased tokens with surrounding punctuation removed.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// ROUGE-1 F1 with clipped unigram overlap. Returns 0 when either side has
/// no tokens or nothing overlaps.
pub fn rouge1_f1(candidate: &str, reference: &str) -> f64 {
    let cand = rouge_tokens(candidate);
    let refs = rouge_tokens(reference);
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in &refs {
        *ref_counts.entry(t).or_default() += 1;
    }
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for t in &cand {
        *cand_counts.entry(t).or_default() += 1;
    }
    let overlap: usize = cand_counts
        .iter()
        .map(|(t, &c)| c.min(ref_counts.get(t).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand.len() as f64;
    let r = overlap as f64 / refs.len() as f64;
    2.0 * p * r / (p + r)
}

/// Per-sentence phrase cache keyed by the SHA-256 of the sentence text.
/// Can be persisted as a JSON sidecar file between runs.
#[derive(Debug, Default)]
pub struct PhraseCache {
    entries: Mutex<BTreeMap<String, Vec<String>>>,
}

impl PhraseCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, SupervisionError> {
        if !path.exists() {
            return Ok(Self::new());
        }
        let text = fs::read_to_string(path).map_err(|source| SupervisionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let entries = serde_json::from_str(&text).map_err(|e| SupervisionError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        Ok(PhraseCache {
            entries: Mutex::new(entries),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SupervisionError> {
        let entries = self.entries.lock().expect("phrase cache lock");
        let json = serde_json::to_string(&*entries).expect("cache serializes");
        fs::write(path, json).map_err(|source| SupervisionError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("phrase cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalized, sorted, deduplicated phrases of `sentence`.
    pub fn phrases(&self, sentence: &str, chunker: &dyn PhraseChunker) -> Vec<String> {
        let key = sha256_hex(sentence.as_bytes());
        if let Some(hit) = self.entries.lock().expect("phrase cache lock").get(&key) {
            return hit.clone();
        }
        let mut phrases: Vec<String> = chunker
            .phrases(sentence)
            .iter()
            .map(|p| normalize_phrase(p))
            .filter(|p| !p.is_empty())
            .collect();
        phrases.sort();
        phrases.dedup();
        self.entries
            .lock()
            .expect("phrase cache lock")
            .insert(key, phrases.clone());
        phrases
    }
}

/// KB-matching candidates for sentence `i`.
///
/// The pool holds triples whose head shares a phrase with the sentence.
/// Within each dimension, tails are ranked by ROUGE-1 F1 between head and
/// sentence (descending, KB order on ties) and the first `top_n` distinct
/// tails are kept.
pub fn heuristic_candidates(
    story: &Story,
    i: usize,
    kb: &KnowledgeBase,
    chunker: &dyn PhraseChunker,
    top_n: usize,
    cache: &PhraseCache,
) -> Vec<Candidate> {
    assert!(i < story.len(), "sentence index {i} out of range");
    let sentence = &story.sentences[i];
    let mut pool: Vec<usize> = cache
        .phrases(sentence, chunker)
        .iter()
        .filter_map(|p| kb.phrase_index().get(p))
        .flatten()
        .copied()
        .collect();
    pool.sort_unstable();
    pool.dedup();

    let mut head_scores: HashMap<&str, f64> = HashMap::new();
    let mut scored: Vec<(f64, usize)> = pool
        .into_iter()
        .map(|idx| {
            let head = kb.triples()[idx].head.as_str();
            let score = *head_scores
                .entry(head)
                .or_insert_with(|| rouge1_f1(head, sentence));
            (score, idx)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut per_dim: BTreeMap<Dimension, Vec<Candidate>> = BTreeMap::new();
    for (score, idx) in scored {
        let triple = &kb.triples()[idx];
        let bucket = per_dim.entry(triple.dimension).or_default();
        if bucket.len() >= top_n || bucket.iter().any(|c| c.inference == triple.tail) {
            continue;
        }
        bucket.push(Candidate {
            story_id: story.id.clone(),
            sentence_idx: i,
            dimension: triple.dimension,
            inference: triple.tail.clone(),
            source: Source::Heuristic,
            match_score: Some(score),
            rank: None,
            coherence_ce: None,
        });
    }
    per_dim.into_values().flatten().collect()
}

/// Generator candidates for sentence `i`, up to `beam` per dimension in the
/// generator's rank order. A failing dimension is logged and left empty.
pub fn model_candidates(
    story: &Story,
    i: usize,
    generator: &dyn SentenceInferenceGenerator,
    beam: usize,
) -> (Vec<Candidate>, usize) {
    assert!(i < story.len(), "sentence index {i} out of range");
    let sentence = &story.sentences[i];
    let mut out = Vec::new();
    let mut failures = 0;
    for dimension in Dimension::ALL {
        let generated = match generator.generate(sentence, dimension, beam) {
            Ok(g) => g,
            Err(e) => {
                log::error!("generator failed for {} sentence {i} {dimension}: {e}", story.id);
                failures += 1;
                continue;
            }
        };
        let mut seen: Vec<&str> = Vec::new();
        for text in &generated {
            let text = text.trim();
            if text.is_empty() || seen.contains(&text) {
                continue;
            }
            seen.push(text);
            if seen.len() > beam {
                break;
            }
            out.push(Candidate {
                story_id: story.id.clone(),
                sentence_idx: i,
                dimension,
                inference: text.to_string(),
                source: Source::Model,
                match_score: None,
                rank: Some(seen.len() - 1),
                coherence_ce: None,
            });
        }
    }
    (out, failures)
}

/// The text whose cross-entropy measures how well an inference fits the
/// story. Cause dimensions see `S_1..S_i + inference`; effect dimensions see
/// the whole story with the inference right after `S_i`.
pub fn coherence_context(story: &Story, i: usize, dimension: Dimension, inference_templated: &str) -> String {
    let mut parts: Vec<&str> = story.sentences[..=i].iter().map(String::as_str).collect();
    parts.push(inference_templated);
    if dimension.group() == DimensionGroup::Effect {
        parts.extend(story.sentences[i + 1..].iter().map(String::as_str));
    }
    parts.join(" ")
}

/// Sets `coherence_ce` on every candidate, scoring in batches of `batch`.
/// Returns how many candidates could not be scored; those keep
/// `coherence_ce = None` and are dropped by [`filter_top_k`].
pub fn score_candidates(
    candidates: &mut [Candidate],
    story: &Story,
    scorer: &dyn TextScorer,
    batch: usize,
) -> usize {
    let batch = batch.max(1);
    let mut failures = 0;
    for chunk in candidates.chunks_mut(batch) {
        let texts: Vec<String> = chunk
            .iter()
            .map(|c| {
                let templated = render_template(c.dimension, &c.inference)
                    .unwrap_or_else(|_| c.dimension.template().to_string());
                coherence_context(story, c.sentence_idx, c.dimension, &templated)
            })
            .collect();
        for (cand, result) in chunk.iter_mut().zip(scorer.score_batch(&texts)) {
            match result {
                Ok(ce) if !ce.is_nan() => cand.coherence_ce = Some(ce),
                Ok(_) | Err(_) => {
                    cand.coherence_ce = None;
                    failures += 1;
                }
            }
        }
    }
    if failures > 0 {
        log::warn!("{failures} candidates of story {} could not be scored", story.id);
    }
    failures
}

/// Keeps the `k` lowest-CE candidates per (story, sentence, dimension).
///
/// Output is grouped by key in (story id, sentence, dimension) order and
/// ascending CE within a key; ties keep input order. Unscored candidates
/// are dropped.
pub fn filter_top_k(candidates: &[Candidate], k: usize) -> Vec<Candidate> {
    let mut groups: BTreeMap<(String, usize, Dimension), Vec<&Candidate>> = BTreeMap::new();
    for c in candidates.iter().filter(|c| c.coherence_ce.is_some()) {
        groups
            .entry((c.story_id.clone(), c.sentence_idx, c.dimension))
            .or_default()
            .push(c);
    }
    let mut out = Vec::new();
    for (_, mut group) in groups {
        group.sort_by(|a, b| a.coherence_ce.unwrap().total_cmp(&b.coherence_ce.unwrap()));
        out.extend(group.into_iter().take(k).cloned());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisionMode {
    Heuristic,
    Model,
    Both,
}

impl std::fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SupervisionMode::Heuristic => "heuristic",
            SupervisionMode::Model => "model",
            SupervisionMode::Both => "both",
        })
    }
}

impl FromStr for SupervisionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "heuristic" => Ok(SupervisionMode::Heuristic),
            "model" => Ok(SupervisionMode::Model),
            "both" => Ok(SupervisionMode::Both),
            other => Err(format!("unknown supervision mode `{other}` (expected heuristic, model or both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisionConfig {
    pub mode: SupervisionMode,
    pub top_n: usize,
    pub keep: usize,
    pub batch: usize,
    pub generator_beam: usize,
    /// Worker threads. Excluded from serialization so it never affects the
    /// output file or its config hash.
    #[serde(skip, default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig {
            mode: SupervisionMode::Heuristic,
            top_n: DEFAULT_TOP_N,
            keep: DEFAULT_KEEP,
            batch: DEFAULT_SCORING_BATCH,
            generator_beam: DEFAULT_GENERATOR_BEAM,
            workers: 1,
        }
    }
}

/// Candidate counts at each pipeline stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionSummary {
    pub stories: usize,
    pub heuristic_candidates: usize,
    pub model_candidates: usize,
    pub pooled: usize,
    pub scoring_failures: usize,
    pub generator_failures: usize,
    pub kept: usize,
}

impl SupervisionSummary {
    fn merge(&mut self, other: &SupervisionSummary) {
        self.stories += other.stories;
        self.heuristic_candidates += other.heuristic_candidates;
        self.model_candidates += other.model_candidates;
        self.pooled += other.pooled;
        self.scoring_failures += other.scoring_failures;
        self.generator_failures += other.generator_failures;
        self.kept += other.kept;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: Header,
}

/// Coherence-filtered training records plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SilverDataset {
    pub records: Vec<Candidate>,
    pub provenance: serde_json::Value,
    pub config_hash: String,
}

impl SilverDataset {
    pub fn new(records: Vec<Candidate>, provenance: serde_json::Value) -> Self {
        let config_hash = config_hash(&provenance);
        SilverDataset {
            records,
            provenance,
            config_hash,
        }
    }

    /// Replaces the provenance snapshot (and its hash).
    pub fn with_provenance(self, provenance: serde_json::Value) -> Self {
        SilverDataset::new(self.records, provenance)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = HeaderLine {
            header: Header {
                config_hash: self.config_hash.clone(),
                config: self.provenance.clone(),
            },
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("candidate serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes through a temporary sibling file and renames it into place, so
    /// a failed write never leaves a partial dataset behind.
    pub fn write(&self, path: &Path) -> Result<(), SupervisionError> {
        write_atomically(path, self.to_jsonl().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, SupervisionError> {
        let file = File::open(path).map_err(|source| SupervisionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut records = Vec::new();
        let mut header: Option<Header> = None;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| SupervisionError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            if n == 0 {
                if let Ok(h) = serde_json::from_str::<HeaderLine>(&line) {
                    header = Some(h.header);
                    continue;
                }
            }
            let record: Candidate = serde_json::from_str(&line).map_err(|e| SupervisionError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        let header = header.unwrap_or_else(|| Header {
            config_hash: config_hash(&serde_json::Value::Null),
            config: serde_json::Value::Null,
        });
        Ok(SilverDataset {
            records,
            provenance: header.config,
            config_hash: header.config_hash,
        })
    }
}

pub fn write_atomically(path: &Path, bytes: &[u8]) -> Result<(), SupervisionError> {
    let io_err = |source| SupervisionError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut tmp = PathBuf::from(path);
    let name = format!(
        ".{}.partial",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("output")
    );
    tmp.set_file_name(name);
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(bytes)?;
        w.flush()?;
        drop(w);
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err)
}

/// Components the pipeline draws on.
pub struct SupervisionInputs<'a> {
    pub kb: &'a KnowledgeBase,
    pub chunker: &'a dyn PhraseChunker,
    pub generator: Option<&'a dyn SentenceInferenceGenerator>,
    pub scorer: &'a dyn TextScorer,
    pub cache: &'a PhraseCache,
}

fn process_story(
    story: &Story,
    inputs: &SupervisionInputs<'_>,
    config: &SupervisionConfig,
) -> (Vec<Candidate>, SupervisionSummary) {
    let mut summary = SupervisionSummary {
        stories: 1,
        ..Default::default()
    };
    let mut pool: Vec<Candidate> = Vec::new();
    for i in 0..story.len() {
        let mut sentence_pool: Vec<Candidate> = Vec::new();
        if matches!(config.mode, SupervisionMode::Heuristic | SupervisionMode::Both) {
            let h = heuristic_candidates(story, i, inputs.kb, inputs.chunker, config.top_n, inputs.cache);
            summary.heuristic_candidates += h.len();
            sentence_pool.extend(h);
        }
        if let (SupervisionMode::Model | SupervisionMode::Both, Some(generator)) =
            (config.mode, inputs.generator)
        {
            let (m, failures) = model_candidates(story, i, generator, config.generator_beam);
            summary.model_candidates += m.len();
            summary.generator_failures += failures;
            for c in m {
                let duplicate = sentence_pool
                    .iter()
                    .any(|p| p.dimension == c.dimension && p.inference == c.inference);
                if !duplicate {
                    sentence_pool.push(c);
                }
            }
        }
        pool.extend(sentence_pool);
    }
    summary.pooled = pool.len();
    summary.scoring_failures = score_candidates(&mut pool, story, inputs.scorer, config.batch);
    let kept = filter_top_k(&pool, config.keep);
    summary.kept = kept.len();
    (kept, summary)
}

/// Runs candidate generation, scoring and filtering over `stories`.
///
/// Stories are processed by `config.workers` threads; results are gathered
/// and sorted by (story id, sentence, dimension, CE) so the output does not
/// depend on scheduling.
pub fn build_supervision(
    stories: &[Story],
    inputs: &SupervisionInputs<'_>,
    config: &SupervisionConfig,
) -> Result<(SilverDataset, SupervisionSummary), SupervisionError> {
    if matches!(config.mode, SupervisionMode::Model | SupervisionMode::Both) && inputs.generator.is_none() {
        return Err(SupervisionError::MissingGenerator(config.mode));
    }
    if config.keep == 0 || config.top_n == 0 || config.generator_beam == 0 {
        return Err(SupervisionError::Config("top_n, keep and generator_beam must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| SupervisionError::Config(e.to_string()))?;
    let per_story: Vec<(Vec<Candidate>, SupervisionSummary)> = pool.install(|| {
        stories
            .par_iter()
            .map(|story| process_story(story, inputs, config))
            .collect()
    });
    let mut summary = SupervisionSummary::default();
    let mut records = Vec::new();
    for (kept, s) in per_story {
        summary.merge(&s);
        records.extend(kept);
    }
    // Within a key the records are already in ascending CE order; the
    // stable sort only brings keys together.
    records.sort_by(|a, b| {
        (a.story_id.as_str(), a.sentence_idx, a.dimension).cmp(&(b.story_id.as_str(), b.sentence_idx, b.dimension))
    });
    let provenance = serde_json::to_value(config).expect("config serializes");
    Ok((SilverDataset::new(records, provenance), summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunk::{FixedChunker, RuleChunker};
    use crate::kb::AtomicTriple;
    use crate::lm::{reference_tiny_lm, LmError, UniformScorer};
    use proptest::prelude::*;

    fn story5() -> Story {
        Story::new(
            "st",
            vec!["S1.".into(), "S2.".into(), "S3.".into(), "S4.".into(), "S5.".into()],
        )
    }

    fn cand(key: usize, ce: f64, text: &str) -> Candidate {
        Candidate {
            story_id: "s".into(),
            sentence_idx: key,
            dimension: Dimension::XWant,
            inference: text.into(),
            source: Source::Heuristic,
            match_score: Some(0.5),
            rank: None,
            coherence_ce: Some(ce),
        }
    }

    #[test]
    fn rouge_examples() {
        assert!((rouge1_f1("wanted to learn", "jim wanted to learn spanish") - 0.75).abs() < 1e-12);
        assert_eq!(rouge1_f1("the cat sat", "the cat sat"), 1.0);
        assert_eq!(rouge1_f1("alpha beta", "gamma delta"), 0.0);
        assert_eq!(rouge1_f1("", "gamma delta"), 0.0);
        assert_eq!(rouge1_f1("...", "!!"), 0.0);
    }

    #[test]
    fn coherence_context_shapes() {
        let s = story5();
        assert_eq!(
            coherence_context(&s, 1, Dimension::XIntent, "PersonX wanted: x"),
            "S1. S2. PersonX wanted: x"
        );
        assert_eq!(
            coherence_context(&s, 1, Dimension::XWant, "PersonX wants: x"),
            "S1. S2. PersonX wants: x S3. S4. S5."
        );
        assert_eq!(
            coherence_context(&s, 4, Dimension::XWant, "I"),
            coherence_context(&s, 4, Dimension::XNeed, "I")
        );
    }

    #[test]
    fn single_shared_phrase_gives_one_candidate() {
        let kb = KnowledgeBase::from_triples(vec![
            AtomicTriple::new("PersonX goes to the store", Dimension::XWant, "to buy milk").unwrap(),
            AtomicTriple::new("PersonX sleeps", Dimension::XReact, "rested").unwrap(),
        ]);
        let chunker = FixedChunker::new(&[
            ("PersonX goes to the store", &["the store"]),
            ("PersonX sleeps", &["sleeps"]),
            ("Tom walked to the store.", &["the store", "walked"]),
        ]);
        let kb = kb.with_phrase_index(&chunker);
        let story = Story::new("s", vec!["Tom walked to the store.".into()]);
        let out = heuristic_candidates(&story, 0, &kb, &chunker, 10, &PhraseCache::new());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].inference, "to buy milk");
        let expected = rouge1_f1("PersonX goes to the store", "Tom walked to the store.");
        assert_eq!(out[0].match_score, Some(expected));
    }

    fn many_heads_kb(n: usize) -> (KnowledgeBase, FixedChunker, Story) {
        // Head k shares "the store" and k extra words with the sentence, so
        // scores are distinct and increase with k.
        let sentence_words: Vec<String> = (0..n).map(|k| format!("w{k}")).collect();
        let sentence = format!("the store {}", sentence_words.join(" "));
        let mut triples = Vec::new();
        let mut chunker = FixedChunker::default();
        for k in 0..n {
            let head = format!("the store {} zz", sentence_words[..k].join(" "));
            triples.push(AtomicTriple::new(&head, Dimension::XWant, &format!("tail{k}")).unwrap());
            chunker.insert(head.trim(), vec!["the store".into()]);
        }
        chunker.insert(&sentence, vec!["the store".into()]);
        let kb = KnowledgeBase::from_triples(triples).with_phrase_index(&chunker);
        (kb, chunker, Story::new("s", vec![sentence]))
    }

    #[test]
    fn top_n_keeps_highest_scores() {
        let (kb, chunker, story) = many_heads_kb(15);
        let out = heuristic_candidates(&story, 0, &kb, &chunker, 10, &PhraseCache::new());
        assert_eq!(out.len(), 10);
        let kept: Vec<&str> = out.iter().map(|c| c.inference.as_str()).collect();
        let expected: Vec<String> = (5..15).rev().map(|k| format!("tail{k}")).collect();
        assert_eq!(kept, expected);
    }

    #[test]
    fn tie_at_cutoff_prefers_kb_order() {
        let heads = ["PersonX buys a car", "PersonX sells a car", "PersonX buys a car"];
        let tails = ["happy", "sad", "proud"];
        let triples: Vec<AtomicTriple> = heads
            .iter()
            .zip(tails)
            .map(|(h, t)| AtomicTriple::new(h, Dimension::XReact, t).unwrap())
            .collect();
        let chunker = FixedChunker::new(&[
            ("PersonX buys a car", &["a car"]),
            ("PersonX sells a car", &["a car"]),
            ("Ann bought a car", &["a car"]),
        ]);
        let kb = KnowledgeBase::from_triples(triples).with_phrase_index(&chunker);
        let story = Story::new("s", vec!["Ann bought a car".into()]);
        // All three heads have the same F1 (overlap "a car"); with top_n = 2
        // KB order decides.
        let out = heuristic_candidates(&story, 0, &kb, &chunker, 2, &PhraseCache::new());
        let kept: Vec<&str> = out.iter().map(|c| c.inference.as_str()).collect();
        assert_eq!(kept, vec!["happy", "sad"]);
    }

    #[test]
    fn heuristic_candidates_require_shared_phrase() {
        let kb = KnowledgeBase::from_triples(vec![
            AtomicTriple::new("PersonX eats an apple", Dimension::XReact, "full").unwrap(),
        ])
        .with_phrase_index(&RuleChunker);
        let story = Story::new("s", vec!["Tom drove a truck.".into()]);
        assert!(heuristic_candidates(&story, 0, &kb, &RuleChunker, 10, &PhraseCache::new()).is_empty());
    }

    struct StubGenerator;

    impl SentenceInferenceGenerator for StubGenerator {
        fn generate(&self, _s: &str, d: Dimension, beam: usize) -> Result<Vec<String>, LmError> {
            match d {
                Dimension::XWant => Ok(vec!["a".into(), "b".into(), "a".into()]),
                Dimension::OReact => Err(LmError::Generator("offline".into())),
                _ => Ok((0..beam).map(|k| format!("{d}-{k}")).collect()),
            }
        }
    }

    struct FullGenerator;

    impl SentenceInferenceGenerator for FullGenerator {
        fn generate(&self, _s: &str, d: Dimension, beam: usize) -> Result<Vec<String>, LmError> {
            Ok((0..beam).map(|k| format!("{d}-{k}")).collect())
        }
    }

    #[test]
    fn model_candidates_pass_through_and_dedup() {
        let story = story5();
        let (out, failures) = model_candidates(&story, 0, &StubGenerator, 10);
        let xwant: Vec<&str> = out
            .iter()
            .filter(|c| c.dimension == Dimension::XWant)
            .map(|c| c.inference.as_str())
            .collect();
        assert_eq!(xwant, vec!["a", "b"]);
        assert_eq!(failures, 1);
        assert!(out.iter().all(|c| c.dimension != Dimension::OReact));

        let (full, _) = model_candidates(&story, 0, &FullGenerator, 10);
        assert_eq!(full.len(), 90);
        assert_eq!(full[0].rank, Some(0));
    }

    #[test]
    fn batching_does_not_change_scores() {
        let story = Story::new("s", vec!["the cat sat on the mat.".into(), "the dog barked loudly.".into()]);
        let lm = reference_tiny_lm(&story.sentences, 3).unwrap();
        let mut a: Vec<Candidate> = (0..200)
            .map(|k| Candidate {
                story_id: "s".into(),
                sentence_idx: k % 2,
                dimension: Dimension::ALL[k % 9],
                inference: format!("word{} the cat", k % 17),
                source: Source::Model,
                match_score: None,
                rank: Some(0),
                coherence_ce: None,
            })
            .collect();
        let mut b = a.clone();
        score_candidates(&mut a, &story, &lm, 1);
        score_candidates(&mut b, &story, &lm, 130);
        assert_eq!(a, b);
        assert!(a.iter().all(|c| c.coherence_ce.is_some()));
    }

    #[test]
    fn uniform_scorer_equal_ce_for_equal_lengths() {
        let story = story5();
        let mut cands = vec![cand(1, 0.0, "alpha beta"), cand(1, 0.0, "gamma delta")];
        score_candidates(&mut cands, &story, &UniformScorer::new(16), 130);
        assert_eq!(cands[0].coherence_ce, cands[1].coherence_ce);
        assert_eq!(cands[0].coherence_ce, Some(4.0));
    }

    #[test]
    fn filter_examples() {
        let seven: Vec<Candidate> = (1..=7).rev().map(|ce| cand(0, ce as f64, &format!("c{ce}"))).collect();
        let kept = filter_top_k(&seven, 5);
        let ces: Vec<f64> = kept.iter().map(|c| c.coherence_ce.unwrap()).collect();
        assert_eq!(ces, vec![1.0, 2.0, 3.0, 4.0, 5.0]);

        let three: Vec<Candidate> = (0..3).map(|k| cand(0, k as f64, "x")).collect();
        assert_eq!(filter_top_k(&three, 5).len(), 3);

        let mut tied: Vec<Candidate> = (0..4).map(|k| cand(0, k as f64, &format!("t{k}"))).collect();
        tied.push(cand(0, 9.0, "first-tied"));
        tied.push(cand(0, 9.0, "second-tied"));
        let kept = filter_top_k(&tied, 5);
        assert_eq!(kept.last().unwrap().inference, "first-tied");
    }

    #[test]
    fn filter_drops_unscored() {
        let mut c = cand(0, 1.0, "x");
        c.coherence_ce = None;
        assert!(filter_top_k(&[c], 5).is_empty());
    }

    fn toy_kb_and_story() -> (KnowledgeBase, Story) {
        let kb = KnowledgeBase::from_triples(vec![
            AtomicTriple::new("PersonX goes to the store", Dimension::XWant, "to buy food").unwrap(),
            AtomicTriple::new("PersonX goes to the store", Dimension::XNeed, "to get dressed").unwrap(),
            AtomicTriple::new("PersonX buys some milk", Dimension::XReact, "satisfied").unwrap(),
            AtomicTriple::new("PersonX drinks some milk", Dimension::XEffect, "gets full").unwrap(),
        ])
        .with_phrase_index(&RuleChunker);
        let story = Story::new(
            "toy",
            vec![
                "Tom went to the store.".into(),
                "He bought some milk.".into(),
                "He drank some milk at home.".into(),
                "It tasted good.".into(),
                "Tom was happy.".into(),
            ],
        );
        (kb, story)
    }

    #[test]
    fn heuristic_pipeline_bounds_and_determinism() {
        let (kb, story) = toy_kb_and_story();
        let lm = reference_tiny_lm(&story.sentences, 2).unwrap();
        let cache = PhraseCache::new();
        let inputs = SupervisionInputs {
            kb: &kb,
            chunker: &RuleChunker,
            generator: None,
            scorer: &lm,
            cache: &cache,
        };
        let config = SupervisionConfig::default();
        let (a, summary) = build_supervision(std::slice::from_ref(&story), &inputs, &config).unwrap();
        assert!(!a.records.is_empty());
        assert!(a.records.len() <= 5 * 9 * 5);
        assert_eq!(summary.kept, a.records.len());
        let (b, _) = build_supervision(&[story], &inputs, &config).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert!(!cache.is_empty());
    }

    #[test]
    fn model_mode_without_generator_is_rejected() {
        let (kb, story) = toy_kb_and_story();
        let lm = UniformScorer::new(4);
        let cache = PhraseCache::new();
        let inputs = SupervisionInputs {
            kb: &kb,
            chunker: &RuleChunker,
            generator: None,
            scorer: &lm,
            cache: &cache,
        };
        let config = SupervisionConfig {
            mode: SupervisionMode::Model,
            ..Default::default()
        };
        assert!(matches!(
            build_supervision(&[story], &inputs, &config),
            Err(SupervisionError::MissingGenerator(_))
        ));
    }

    #[test]
    fn both_mode_merges_pools_before_filtering() {
        // The generator repeats one KB tail (overlap) and adds many new ones:
        // after merging, each key still holds at most `keep` records and the
        // overlapping tail appears once.
        struct Overlap;
        impl SentenceInferenceGenerator for Overlap {
            fn generate(&self, _s: &str, d: Dimension, beam: usize) -> Result<Vec<String>, LmError> {
                let mut out = vec!["to buy food".to_string()];
                out.extend((0..beam - 1).map(|k| format!("{d} option {k}")));
                Ok(out)
            }
        }
        let (kb, story) = toy_kb_and_story();
        let lm = reference_tiny_lm(&story.sentences, 2).unwrap();
        let cache = PhraseCache::new();
        let inputs = SupervisionInputs {
            kb: &kb,
            chunker: &RuleChunker,
            generator: Some(&Overlap),
            scorer: &lm,
            cache: &cache,
        };
        let config = SupervisionConfig {
            mode: SupervisionMode::Both,
            ..Default::default()
        };
        let (ds, summary) = build_supervision(&[story], &inputs, &config).unwrap();
        assert!(summary.pooled < summary.heuristic_candidates + summary.model_candidates);
        let mut per_key: HashMap<(usize, Dimension), Vec<&str>> = HashMap::new();
        for r in &ds.records {
            per_key.entry((r.sentence_idx, r.dimension)).or_default().push(&r.inference);
        }
        for texts in per_key.values() {
            assert!(texts.len() <= 5);
            let food = texts.iter().filter(|t| **t == "to buy food").count();
            assert!(food <= 1);
        }
    }

    #[test]
    fn silver_roundtrip_and_atomic_write() {
        let ds = SilverDataset::new(vec![cand(0, 1.5, "x")], serde_json::json!({"mode": "heuristic"}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silver.jsonl");
        ds.write(&path).unwrap();
        let back = SilverDataset::read(&path).unwrap();
        assert_eq!(back, ds);
        assert!(!dir.path().join(".silver.jsonl.partial").exists());
        assert!(ds.write(&dir.path().join("missing/dir/out.jsonl")).is_err());
    }

    #[test]
    fn phrase_cache_persists() {
        let cache = PhraseCache::new();
        let p = cache.phrases("Tom went to the store.", &RuleChunker);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        cache.save(&path).unwrap();
        let loaded = PhraseCache::load(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        // A chunker returning nothing proves the answer came from the cache.
        assert_eq!(loaded.phrases("Tom went to the store.", &FixedChunker::default()), p);
    }

    fn full_sort_oracle(pool: &[Candidate], k: usize) -> Vec<Candidate> {
        let mut indexed: Vec<(usize, &Candidate)> = pool.iter().enumerate().collect();
        indexed.sort_by(|(ia, a), (ib, b)| {
            let ka = (&a.story_id, a.sentence_idx, a.dimension);
            let kb = (&b.story_id, b.sentence_idx, b.dimension);
            ka.cmp(&kb)
                .then(a.coherence_ce.unwrap().partial_cmp(&b.coherence_ce.unwrap()).unwrap())
                .then(ia.cmp(ib))
        });
        let mut out: Vec<Candidate> = Vec::new();
        for (_, c) in indexed {
            let same = out.iter().filter(|o| o.key() == c.key()).count();
            if same < k {
                out.push(c.clone());
            }
        }
        out
    }

    proptest! {
        #[test]
        fn filter_matches_full_sort(ces in prop::collection::vec((0usize..3, 0u8..6), 0..=20), k in 1usize..7) {
            let pool: Vec<Candidate> = ces
                .iter()
                .enumerate()
                .map(|(n, &(key, ce))| cand(key, ce as f64 * 0.5, &format!("c{n}")))
                .collect();
            let got = filter_top_k(&pool, k);
            prop_assert_eq!(&got, &full_sort_oracle(&pool, k));
            for c in &got {
                prop_assert!(pool.contains(c));
            }
        }

        #[test]
        fn rouge_in_unit_interval(a in "[a-d ]{0,20}", b in "[a-d ]{0,20}") {
            let f = rouge1_f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}
