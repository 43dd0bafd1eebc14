//! Scoring, generation, embedding and entailment interfaces, with small
//! reference implementations that need no external model weights.
//!
//! Cross-entropy is always reported in bits per token:
//! `CE(t_1..t_n) = -(1/n) * sum_i log2 p(t_i | t_1..t_{i-1})`.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::fnv1a64;
use crate::kb::{Dimension, KnowledgeBase};
use crate::supervision::rouge1_f1;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("cannot score an empty token sequence")]
    EmptySequence,
    #[error("cannot fit a language model on an empty corpus")]
    EmptyCorpus,
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
    #[error("scorer produced a NaN log-probability at position {0}")]
    NotANumber(usize),
    #[error("model server error: {0}")]
    Remote(String),
    #[error("generator failed: {0}")]
    Generator(String),
    #[error("classifier failed: {0}")]
    Classifier(String),
}

/// Lowercased whitespace tokenization shared by the reference models.
pub fn simple_tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token ids together with the text they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub text: String,
}

/// A language model that exposes per-token conditional probabilities.
pub trait LmScorer: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn encode(&self, text: &str) -> TokenSequence;

    /// `log2 p(t_i | t_1..t_{i-1})` for every position. May contain
    /// `-inf` for zero-probability tokens, never NaN.
    fn log2_probs(&self, seq: &TokenSequence) -> Result<Vec<f64>, LmError>;
}

/// Mean negative log2 probability per token. A zero-probability token makes
/// the result `+inf`; callers can test with [`f64::is_infinite`].
pub fn cross_entropy(scorer: &dyn LmScorer, seq: &TokenSequence) -> Result<f64, LmError> {
    if seq.tokens.is_empty() {
        return Err(LmError::EmptySequence);
    }
    let logs = scorer.log2_probs(seq)?;
    let mut total = 0.0;
    for (i, lp) in logs.iter().enumerate() {
        if lp.is_nan() {
            return Err(LmError::NotANumber(i));
        }
        if *lp == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        total -= lp;
    }
    Ok(total / logs.len() as f64)
}

/// Anything that can turn texts into bits-per-token coherence scores.
///
/// Every [`LmScorer`] is one; remote scorers that only speak text implement
/// it directly.
pub trait TextScorer: Send + Sync {
    fn score_text(&self, text: &str) -> Result<f64, LmError>;

    /// Scores a batch. Batch composition must never change the values.
    fn score_batch(&self, texts: &[String]) -> Vec<Result<f64, LmError>> {
        texts.iter().map(|t| self.score_text(t)).collect()
    }
}

impl<T: LmScorer> TextScorer for T {
    fn score_text(&self, text: &str) -> Result<f64, LmError> {
        cross_entropy(self, &self.encode(text))
    }
}

/// Assigns `1/V` to every token.
#[derive(Debug, Clone)]
pub struct UniformScorer {
    vocab: usize,
}

impl UniformScorer {
    pub fn new(vocab: usize) -> Self {
        assert!(vocab > 0, "vocabulary must be non-empty");
        UniformScorer { vocab }
    }
}

impl LmScorer for UniformScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn encode(&self, text: &str) -> TokenSequence {
        let tokens = simple_tokenize(text)
            .iter()
            .map(|t| (fnv1a64(t.as_bytes()) % self.vocab as u64) as u32)
            .collect();
        TokenSequence {
            tokens,
            text: text.to_string(),
        }
    }

    fn log2_probs(&self, seq: &TokenSequence) -> Result<Vec<f64>, LmError> {
        Ok(vec![-(self.vocab as f64).log2(); seq.tokens.len()])
    }
}

/// Add-one smoothed n-gram model over lowercased whitespace tokens.
///
/// `p(w | h) = (c(h, w) + 1) / (c(h) + V)` where `h` is the previous
/// `order - 1` tokens (left-padded with a start symbol) and `V` counts the
/// training types plus one unknown-word type. The start symbol is context
/// only and is never predicted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NgramScorer {
    order: usize,
    vocab: HashMap<String, u32>,
    context_counts: HashMap<Vec<u32>, u64>,
    ngram_counts: HashMap<Vec<u32>, u64>,
}

impl NgramScorer {
    const UNK: u32 = 0;
    const BOS: u32 = u32::MAX;

    pub fn order(&self) -> usize {
        self.order
    }

    fn context(tokens: &[u32], i: usize, order: usize) -> Vec<u32> {
        let width = order - 1;
        (0..width)
            .map(|k| {
                let offset = width - k;
                if i >= offset {
                    tokens[i - offset]
                } else {
                    Self::BOS
                }
            })
            .collect()
    }
}

/// Fits the reference n-gram scorer on a list of texts.
pub fn reference_tiny_lm(train_texts: &[String], order: usize) -> Result<NgramScorer, LmError> {
    if order == 0 {
        return Err(LmError::ZeroOrder);
    }
    let tokenized: Vec<Vec<String>> = train_texts.iter().map(|t| simple_tokenize(t)).collect();
    if tokenized.iter().all(|t| t.is_empty()) {
        return Err(LmError::EmptyCorpus);
    }
    let mut vocab: HashMap<String, u32> = HashMap::new();
    for tokens in &tokenized {
        for t in tokens {
            let next = vocab.len() as u32 + 1;
            vocab.entry(t.clone()).or_insert(next);
        }
    }
    let mut scorer = NgramScorer {
        order,
        vocab,
        context_counts: HashMap::new(),
        ngram_counts: HashMap::new(),
    };
    for tokens in &tokenized {
        let ids: Vec<u32> = tokens.iter().map(|t| scorer.vocab[t]).collect();
        for i in 0..ids.len() {
            let ctx = NgramScorer::context(&ids, i, order);
            let mut gram = ctx.clone();
            gram.push(ids[i]);
            *scorer.context_counts.entry(ctx).or_default() += 1;
            *scorer.ngram_counts.entry(gram).or_default() += 1;
        }
    }
    Ok(scorer)
}

impl LmScorer for NgramScorer {
    fn vocab_size(&self) -> usize {
        self.vocab.len() + 1
    }

    fn encode(&self, text: &str) -> TokenSequence {
        let tokens = simple_tokenize(text)
            .iter()
            .map(|t| self.vocab.get(t).copied().unwrap_or(Self::UNK))
            .collect();
        TokenSequence {
            tokens,
            text: text.to_string(),
        }
    }

    fn log2_probs(&self, seq: &TokenSequence) -> Result<Vec<f64>, LmError> {
        let v = self.vocab_size() as f64;
        Ok((0..seq.tokens.len())
            .map(|i| {
                let ctx = Self::context(&seq.tokens, i, self.order);
                let c_ctx = self.context_counts.get(&ctx).copied().unwrap_or(0) as f64;
                let mut gram = ctx;
                gram.push(seq.tokens[i]);
                let c_gram = self.ngram_counts.get(&gram).copied().unwrap_or(0) as f64;
                ((c_gram + 1.0) / (c_ctx + v)).log2()
            })
            .collect())
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    op: &'static str,
    text: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    bits_per_token: Option<f64>,
    error: Option<String>,
}

/// Talks to an external scoring server over a line-delimited JSON protocol.
///
/// Each request is one line `{"op":"score","text":"..."}`; the server answers
/// with one line `{"bits_per_token": <float>}` or `{"error": "<message>"}`.
/// Transport is whatever reader/writer pair the caller supplies (child
/// process pipes, a socket, an in-memory buffer).
pub struct LineProtocolScorer<R, W> {
    io: Mutex<(R, W)>,
}

impl<R: BufRead + Send, W: Write + Send> LineProtocolScorer<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        LineProtocolScorer {
            io: Mutex::new((reader, writer)),
        }
    }
}

impl<R: BufRead + Send, W: Write + Send> TextScorer for LineProtocolScorer<R, W> {
    fn score_text(&self, text: &str) -> Result<f64, LmError> {
        let mut guard = self.io.lock().map_err(|_| LmError::Remote("poisoned".into()))?;
        let (reader, writer) = &mut *guard;
        let request = serde_json::to_string(&ScoreRequest { op: "score", text })
            .map_err(|e| LmError::Remote(e.to_string()))?;
        writeln!(writer, "{request}").map_err(|e| LmError::Remote(e.to_string()))?;
        writer.flush().map_err(|e| LmError::Remote(e.to_string()))?;
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| LmError::Remote(e.to_string()))?;
        if line.trim().is_empty() {
            return Err(LmError::Remote("connection closed".into()));
        }
        let response: ScoreResponse =
            serde_json::from_str(&line).map_err(|e| LmError::Remote(e.to_string()))?;
        match (response.bits_per_token, response.error) {
            (_, Some(err)) => Err(LmError::Remote(err)),
            (Some(bits), None) if bits.is_nan() => Err(LmError::NotANumber(0)),
            (Some(bits), None) => Ok(bits),
            (None, None) => Err(LmError::Remote("response missing bits_per_token".into())),
        }
    }
}

/// Produces sentence-level inferences for one dimension, best first.
pub trait SentenceInferenceGenerator: Send + Sync {
    fn generate(&self, sentence: &str, dimension: Dimension, beam: usize) -> Result<Vec<String>, LmError>;
}

/// Stand-in for a trained sentence-level generator: ranks KB heads by
/// ROUGE-1 F1 against the sentence and returns the tails of the best heads.
pub struct RetrievalGenerator<'a> {
    kb: &'a KnowledgeBase,
}

impl<'a> RetrievalGenerator<'a> {
    pub fn new(kb: &'a KnowledgeBase) -> Self {
        RetrievalGenerator { kb }
    }
}

impl SentenceInferenceGenerator for RetrievalGenerator<'_> {
    fn generate(&self, sentence: &str, dimension: Dimension, beam: usize) -> Result<Vec<String>, LmError> {
        let mut scored: Vec<(f64, usize)> = self
            .kb
            .triples()
            .iter()
            .enumerate()
            .filter(|(_, t)| t.dimension == dimension && !t.is_none_tail())
            .map(|(i, t)| (rouge1_f1(&t.head, sentence), i))
            .filter(|(score, _)| *score > 0.0)
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut out: Vec<String> = Vec::new();
        for (_, i) in scored {
            let tail = &self.kb.triples()[i].tail;
            if !out.contains(tail) {
                out.push(tail.clone());
            }
            if out.len() == beam {
                break;
            }
        }
        Ok(out)
    }
}

/// Maps text to a fixed-dimension vector.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, LmError>;
    /// Identifies the embedder so indexes built with different ones are not mixed.
    fn identity(&self) -> String;
}

/// Feature-hashed bag of lowercased words with sign hashing.
#[derive(Debug, Clone)]
pub struct HashedBowEmbedder {
    dim: usize,
}

impl HashedBowEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        HashedBowEmbedder { dim }
    }
}

impl TextEmbedder for HashedBowEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, LmError> {
        let mut v = vec![0.0; self.dim];
        for token in simple_tokenize(text) {
            let token = token.trim_matches(|c: char| c.is_ascii_punctuation());
            if token.is_empty() {
                continue;
            }
            let h = fnv1a64(token.as_bytes());
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        Ok(v)
    }

    fn identity(&self) -> String {
        format!("hashed-bow-fnv1a64-d{}", self.dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl std::fmt::Display for NliLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradiction => "contradiction",
        })
    }
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [NliLabel::Entailment, NliLabel::Neutral, NliLabel::Contradiction];
}

pub trait NliClassifier: Send + Sync {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, LmError>;
}

/// Always answers with the same label.
#[derive(Debug, Clone, Copy)]
pub struct ConstantNli(pub NliLabel);

impl NliClassifier for ConstantNli {
    fn classify(&self, _premise: &str, _hypothesis: &str) -> Result<NliLabel, LmError> {
        Ok(self.0)
    }
}

/// Crude lexical entailment heuristic used when no trained classifier is
/// available: contradiction when exactly one side is negated and the two
/// share content words, entailment when every content word of the
/// hypothesis occurs in the premise, neutral otherwise.
#[derive(Debug, Clone, Default)]
pub struct LexicalNli;

impl LexicalNli {
    const STOP: &'static [&'static str] = &[
        "they", "others", "the", "a", "an", "to", "of", "and", "is", "are", "was", "were", "be",
        "seen", "as", "likely", "want", "need", "then", "feel", "he", "she", "i", "it", "their",
    ];
    const NEGATIONS: &'static [&'static str] = &["not", "no", "never", "n't", "nothing", "nobody"];

    fn words(text: &str) -> Vec<String> {
        simple_tokenize(&text.replace("n't", " n't"))
            .into_iter()
            .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_string())
            .filter(|w| !w.is_empty())
            .collect()
    }
}

impl NliClassifier for LexicalNli {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, LmError> {
        let p = Self::words(premise);
        let h = Self::words(hypothesis);
        let negated = |ws: &[String]| ws.iter().any(|w| Self::NEGATIONS.contains(&w.as_str()) || w == "n't");
        let content: Vec<&String> = h
            .iter()
            .filter(|w| !Self::STOP.contains(&w.as_str()) && !Self::NEGATIONS.contains(&w.as_str()))
            .collect();
        let shared = content.iter().filter(|w| p.contains(w)).count();
        if shared > 0 && negated(&p) != negated(&h) {
            return Ok(NliLabel::Contradiction);
        }
        if !content.is_empty() && shared == content.len() {
            return Ok(NliLabel::Entailment);
        }
        Ok(NliLabel::Neutral)
    }
}
