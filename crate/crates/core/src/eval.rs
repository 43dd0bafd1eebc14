//! Automatic metrics and human-annotation aggregation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Story;
use crate::kb::{is_none_text, normalize_for_nli, Dimension, KnowledgeBase};
use crate::lm::{NliClassifier, NliLabel};
use crate::supervision::Candidate;

pub const DEFAULT_NOVELTY_THRESHOLD: f64 = 0.95;
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("BLEU order must be at least 1")]
    ZeroOrder,
    #[error("rating {rating} of item {item} is outside 1..=5")]
    BadRating { item: String, rating: u8 },
    #[error("item {0} has no ratings")]
    NoRatings(String),
}

/// Lowercased whitespace tokens.
pub fn bleu_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub brevity_penalty: f64,
    pub segments: usize,
    pub skipped_keys: usize,
}

/// Corpus BLEU-`n` with uniform weights.
///
/// Every hypothesis of a key is a separate segment scored against all of
/// that key's references. Zero clipped counts are replaced by
/// [`BLEU_EPSILON`]. The reference length of a segment is the closest
/// reference length (shorter one on ties). Keys without references are
/// skipped and counted.
pub fn bleu<K: Ord>(
    hypotheses: &BTreeMap<K, Vec<String>>,
    references: &BTreeMap<K, Vec<String>>,
    n: usize,
) -> Result<BleuScore, EvalError> {
    if n == 0 {
        return Err(EvalError::ZeroOrder);
    }
    let mut matches = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    let mut segments = 0usize;
    let mut skipped = 0usize;
    for (key, hyps) in hypotheses {
        let refs: Vec<Vec<String>> = match references.get(key) {
            Some(r) if !r.is_empty() => r.iter().map(|t| bleu_tokens(t)).collect(),
            _ => {
                skipped += 1;
                continue;
            }
        };
        for hyp in hyps {
            let h = bleu_tokens(hyp);
            segments += 1;
            hyp_len += h.len();
            ref_len += refs
                .iter()
                .map(|r| r.len())
                .min_by_key(|&l| ((l as i64 - h.len() as i64).abs(), l))
                .unwrap();
            for m in 1..=n {
                let hc = ngram_counts(&h, m);
                let mut max_ref: HashMap<&[String], usize> = HashMap::new();
                for r in &refs {
                    for (g, c) in ngram_counts(r, m) {
                        let e = max_ref.entry(g).or_default();
                        *e = (*e).max(c);
                    }
                }
                matches[m - 1] += hc
                    .iter()
                    .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                    .sum::<usize>();
                totals[m - 1] += h.len().saturating_sub(m - 1);
            }
        }
    }
    if segments == 0 {
        return Err(EvalError::Empty("no hypothesis has references"));
    }
    if hyp_len == 0 {
        return Ok(BleuScore {
            score: 0.0,
            brevity_penalty: 0.0,
            segments,
            skipped_keys: skipped,
        });
    }
    let mut log_sum = 0.0;
    for m in 0..n {
        let p = if totals[m] == 0 || matches[m] == 0 {
            BLEU_EPSILON / totals[m].max(1) as f64
        } else {
            matches[m] as f64 / totals[m] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(BleuScore {
        score: bp * (log_sum / n as f64).exp(),
        brevity_penalty: bp,
        segments,
        skipped_keys: skipped,
    })
}

/// Character-level Levenshtein distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (up + 1).min(row[j] + 1).min(diag + usize::from(ca != cb));
            diag = up;
        }
    }
    row[b.len()]
}

/// `1 - levenshtein(a, b) / max(|a|, |b|)`, with two empty strings at 1.
pub fn edit_distance_ratio(a: &str, b: &str) -> f64 {
    let max = a.chars().count().max(b.chars().count());
    if max == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / max as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoveltyResult {
    pub novelty_pct: f64,
    pub novel: usize,
    pub total: usize,
    pub excluded_none: usize,
}

/// Share of generated inferences whose similarity to every KB entry of the
/// same dimension is below `threshold`. With `include_heads`, head events
/// join the comparison set. "none" generations are excluded.
pub fn novelty(
    generated: &[(Dimension, String)],
    kb: &KnowledgeBase,
    threshold: f64,
    include_heads: bool,
) -> Result<NoveltyResult, EvalError> {
    if generated.is_empty() {
        return Err(EvalError::Empty("no generated inferences"));
    }
    let mut per_dim: BTreeMap<Dimension, BTreeSet<String>> = BTreeMap::new();
    for t in kb.triples() {
        per_dim.entry(t.dimension).or_default().insert(t.tail.to_lowercase());
    }
    let heads: BTreeSet<String> = if include_heads {
        kb.events().iter().map(|e| e.to_lowercase()).collect()
    } else {
        BTreeSet::new()
    };
    let empty = BTreeSet::new();
    let mut novel = 0;
    let mut total = 0;
    let mut excluded = 0;
    for (dim, text) in generated {
        if is_none_text(text) {
            excluded += 1;
            continue;
        }
        total += 1;
        let text = text.trim().to_lowercase();
        let similar = per_dim
            .get(dim)
            .unwrap_or(&empty)
            .iter()
            .chain(heads.iter())
            .any(|entry| edit_distance_ratio(&text, entry) >= threshold);
        if !similar {
            novel += 1;
        }
    }
    let novelty_pct = if total == 0 { 0.0 } else { 100.0 * novel as f64 / total as f64 };
    Ok(NoveltyResult {
        novelty_pct,
        novel,
        total,
        excluded_none: excluded,
    })
}

/// Contradiction if any label is a contradiction, otherwise entailment if any
/// is an entailment, otherwise neutral.
pub fn aggregate_nli_labels(labels: &[NliLabel]) -> NliLabel {
    if labels.contains(&NliLabel::Contradiction) {
        NliLabel::Contradiction
    } else if labels.contains(&NliLabel::Entailment) {
        NliLabel::Entailment
    } else {
        NliLabel::Neutral
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NliDistribution {
    pub counts: BTreeMap<NliLabel, usize>,
    pub pair_failures: usize,
}

impl NliDistribution {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn add(&mut self, label: NliLabel) {
        *self.counts.entry(label).or_default() += 1;
    }

    pub fn merge(&mut self, other: &NliDistribution) {
        for (l, c) in &other.counts {
            *self.counts.entry(*l).or_default() += c;
        }
        self.pair_failures += other.pair_failures;
    }

    /// Percentage per label; all zero when empty.
    pub fn percentages(&self) -> BTreeMap<NliLabel, f64> {
        let total = self.total();
        NliLabel::ALL
            .iter()
            .map(|&l| {
                let c = self.counts.get(&l).copied().unwrap_or(0);
                let pct = if total == 0 { 0.0 } else { 100.0 * c as f64 / total as f64 };
                (l, pct)
            })
            .collect()
    }
}

/// Labels each inference against every sentence of its story as premise and
/// aggregates with [`aggregate_nli_labels`]. A failing pair counts as neutral.
pub fn nli_coherence(story: &Story, inferences: &[Candidate], classifier: &dyn NliClassifier) -> NliDistribution {
    let mut dist = NliDistribution::default();
    for inf in inferences {
        let hypothesis = match normalize_for_nli(inf.dimension, &inf.inference) {
            Ok(h) => h,
            Err(_) => continue,
        };
        let labels: Vec<NliLabel> = story
            .sentences
            .iter()
            .map(|premise| {
                classifier.classify(premise, &hypothesis).unwrap_or_else(|e| {
                    log::warn!("NLI failed on ({premise}, {hypothesis}): {e}");
                    dist.pair_failures += 1;
                    NliLabel::Neutral
                })
            })
            .collect();
        dist.add(aggregate_nli_labels(&labels));
    }
    dist
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub item_id: String,
    pub ratings: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub items: usize,
    /// Percent of items whose majority label is 3, 4 or 5.
    pub pct_3to5: f64,
    /// Percent of items whose majority label is exactly 3.
    pub pct_3: f64,
    /// Mean over items of the mean rater score.
    pub avg_rating: f64,
    /// Mean over items of the majority label.
    pub avg_majority: f64,
}

/// Most frequent rating; ties go to the lower score.
pub fn majority_vote(ratings: &[u8]) -> Option<u8> {
    let mut counts = [0usize; 256];
    for &r in ratings {
        counts[r as usize] += 1;
    }
    let best = *counts.iter().max()?;
    if best == 0 {
        return None;
    }
    counts.iter().position(|&c| c == best).map(|p| p as u8)
}

pub fn aggregate_annotations(records: &[AnnotationRecord]) -> Result<AnnotationSummary, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("no annotation records"));
    }
    let mut in_range = 0usize;
    let mut threes = 0usize;
    let mut mean_sum = 0.0;
    let mut majority_sum = 0.0;
    for r in records {
        if r.ratings.is_empty() {
            return Err(EvalError::NoRatings(r.item_id.clone()));
        }
        if let Some(&bad) = r.ratings.iter().find(|&&x| !(1..=5).contains(&x)) {
            return Err(EvalError::BadRating {
                item: r.item_id.clone(),
                rating: bad,
            });
        }
        let m = majority_vote(&r.ratings).expect("non-empty ratings");
        if m >= 3 {
            in_range += 1;
        }
        if m == 3 {
            threes += 1;
        }
        majority_sum += m as f64;
        mean_sum += r.ratings.iter().map(|&x| x as f64).sum::<f64>() / r.ratings.len() as f64;
    }
    let n = records.len() as f64;
    Ok(AnnotationSummary {
        items: records.len(),
        pct_3to5: 100.0 * in_range as f64 / n,
        pct_3: 100.0 * threes as f64 / n,
        avg_rating: mean_sum / n,
        avg_majority: majority_sum / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub keys: usize,
    pub hypotheses: usize,
    pub skipped_keys: usize,
    pub novelty_items: usize,
    pub nli_items: usize,
    pub nli_pair_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub bleu1: f64,
    pub bleu2: f64,
    pub novelty_pct: f64,
    pub nli_pct: BTreeMap<NliLabel, f64>,
    pub counts: EvalCounts,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<16}{:>10}\n", "metric", "value"));
        out.push_str(&format!("{:<16}{:>10.4}\n", "BLEU-1", self.bleu1));
        out.push_str(&format!("{:<16}{:>10.4}\n", "BLEU-2", self.bleu2));
        out.push_str(&format!("{:<16}{:>10.2}\n", "novelty %", self.novelty_pct));
        for (label, pct) in &self.nli_pct {
            out.push_str(&format!("{:<16}{:>10.2}\n", format!("{label} %"), pct));
        }
        out.push_str(&format!(
            "{:<16}{:>10}\n{:<16}{:>10}\n",
            "keys", self.counts.keys, "hypotheses", self.counts.hypotheses
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::AtomicTriple;
    use crate::lm::{ConstantNli, LmError};
    use crate::supervision::Source;
    use proptest::prelude::*;

    fn one(key: &str, texts: &[&str]) -> BTreeMap<String, Vec<String>> {
        BTreeMap::from([(key.to_string(), texts.iter().map(|s| s.to_string()).collect())])
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let h = one("k", &["the cat sat"]);
        assert!((bleu(&h, &h, 1).unwrap().score - 1.0).abs() < 1e-12);
        assert!((bleu(&h, &h, 2).unwrap().score - 1.0).abs() < 1e-12);
        let r = one("k", &["a dog ran"]);
        assert!(bleu(&h, &r, 1).unwrap().score < 1e-8);
    }

    #[test]
    fn bleu_two_key_hand_computed() {
        // key a: hyp "the the cat" vs ref "the cat is here"; clipped unigrams
        // the:1 cat:1 = 2 of 3, bigrams "the cat" 1 of 2.
        // key b: hyp "a dog" vs refs "a dog" and "one big dog"; unigrams 2/2,
        // bigrams 1/1; closest ref length 2.
        // c = 5, r = 4 + 2 = 6.
        let mut hyps = one("a", &["the the cat"]);
        hyps.extend(one("b", &["a dog"]));
        let mut refs = one("a", &["the cat is here"]);
        refs.extend(one("b", &["a dog", "one big dog"]));
        let bp = (1.0f64 - 6.0 / 5.0).exp();
        let b1 = bleu(&hyps, &refs, 1).unwrap();
        assert!((b1.score - bp * 4.0 / 5.0).abs() < 1e-9);
        let b2 = bleu(&hyps, &refs, 2).unwrap();
        let expected = bp * ((4.0f64 / 5.0).ln() / 2.0 + (2.0f64 / 3.0).ln() / 2.0).exp();
        assert!((b2.score - expected).abs() < 1e-9);
    }

    #[test]
    fn bleu_skips_keys_without_references() {
        let mut hyps = one("a", &["x y"]);
        hyps.extend(one("b", &["x y"]));
        let refs = one("a", &["x y"]);
        let s = bleu(&hyps, &refs, 1).unwrap();
        assert_eq!(s.skipped_keys, 1);
        assert_eq!(s.segments, 1);
        assert!(bleu(&hyps, &BTreeMap::new(), 1).is_err());
    }

    #[test]
    fn edit_ratio_examples() {
        assert_eq!(edit_distance_ratio("abc", "abc"), 1.0);
        assert_eq!(edit_distance_ratio("abcd", "abce"), 0.75);
        assert_eq!(edit_distance_ratio("", "ab"), 0.0);
        assert_eq!(edit_distance_ratio("", ""), 1.0);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
    }

    fn kb() -> KnowledgeBase {
        KnowledgeBase::from_triples(vec![
            AtomicTriple::new("PersonX goes home", Dimension::XWant, "to take a long relaxing bath now").unwrap(),
            AtomicTriple::new("PersonX goes home", Dimension::XReact, "tired").unwrap(),
        ])
    }

    #[test]
    fn novelty_examples() {
        let kb = kb();
        let g = |d, t: &str| vec![(d, t.to_string())];
        let exact = novelty(&g(Dimension::XWant, "to take a long relaxing bath now"), &kb, 0.95, false).unwrap();
        assert_eq!(exact.novelty_pct, 0.0);
        let fresh = novelty(&g(Dimension::XWant, "zzz"), &kb, 0.95, false).unwrap();
        assert_eq!(fresh.novelty_pct, 100.0);
        // 30 characters, one substitution: similarity 1 - 1/30 > 0.95.
        let entry = "to take a long relaxing bath now";
        let near: String = entry.replacen('b', "p", 1);
        assert!(edit_distance_ratio(&near, entry) >= 0.95);
        let r = novelty(&g(Dimension::XWant, &near), &kb, 0.95, false).unwrap();
        assert_eq!(r.novelty_pct, 0.0);
        // Another dimension does not count unless it is a head.
        assert_eq!(novelty(&g(Dimension::OWant, "tired"), &kb, 0.95, false).unwrap().novelty_pct, 100.0);
        assert_eq!(
            novelty(&g(Dimension::OWant, "personx goes home"), &kb, 0.95, true).unwrap().novelty_pct,
            0.0
        );
        let with_none = vec![(Dimension::XWant, "none".to_string()), (Dimension::XWant, "zzz".to_string())];
        let r = novelty(&with_none, &kb, 0.95, false).unwrap();
        assert_eq!((r.total, r.excluded_none), (1, 1));
        assert!(novelty(&[], &kb, 0.95, false).is_err());
    }

    fn cand(d: Dimension, t: &str) -> Candidate {
        Candidate {
            story_id: "s".into(),
            sentence_idx: 0,
            dimension: d,
            inference: t.into(),
            source: Source::Model,
            match_score: None,
            rank: Some(0),
            coherence_ce: None,
        }
    }

    struct ContradictThird;

    impl NliClassifier for ContradictThird {
        fn classify(&self, premise: &str, _h: &str) -> Result<NliLabel, LmError> {
            Ok(if premise == "S3." { NliLabel::Contradiction } else { NliLabel::Neutral })
        }
    }

    struct Failing;

    impl NliClassifier for Failing {
        fn classify(&self, _p: &str, _h: &str) -> Result<NliLabel, LmError> {
            Err(LmError::Classifier("down".into()))
        }
    }

    #[test]
    fn nli_examples() {
        let story = Story::new("s", (1..=5).map(|k| format!("S{k}.")).collect());
        let inf = vec![cand(Dimension::XWant, "to sleep")];
        let d = nli_coherence(&story, &inf, &ContradictThird);
        assert_eq!(d.counts.get(&NliLabel::Contradiction), Some(&1));
        let d = nli_coherence(&story, &inf, &ConstantNli(NliLabel::Neutral));
        assert_eq!(d.percentages()[&NliLabel::Neutral], 100.0);
        let d = nli_coherence(&story, &inf, &Failing);
        assert_eq!(d.pair_failures, 5);
        assert_eq!(d.counts.get(&NliLabel::Neutral), Some(&1));
    }

    #[test]
    fn annotation_examples() {
        let rec = |id: &str, r: &[u8]| AnnotationRecord {
            item_id: id.into(),
            ratings: r.to_vec(),
        };
        assert_eq!(majority_vote(&[5, 5, 1]), Some(5));
        assert_eq!(majority_vote(&[4, 2]), Some(2));
        let all3 = aggregate_annotations(&[rec("a", &[3, 3, 3]), rec("b", &[3, 3])]).unwrap();
        assert_eq!(all3.pct_3to5, 100.0);
        assert_eq!(all3.avg_rating, 3.0);
        let mixed = aggregate_annotations(&[rec("a", &[4, 2]), rec("b", &[5, 5, 1])]).unwrap();
        assert_eq!(mixed.pct_3to5, 50.0);
        assert!((mixed.avg_rating - (3.0 + 11.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(mixed.avg_majority, 3.5);
        assert!(aggregate_annotations(&[rec("a", &[])]).is_err());
        assert!(aggregate_annotations(&[rec("a", &[6])]).is_err());
    }

    /// Rule table written out case by case.
    fn rule_oracle(labels: &[NliLabel]) -> NliLabel {
        let mut c = false;
        let mut e = false;
        for l in labels {
            match l {
                NliLabel::Contradiction => c = true,
                NliLabel::Entailment => e = true,
                NliLabel::Neutral => {}
            }
        }
        match (c, e) {
            (true, _) => NliLabel::Contradiction,
            (false, true) => NliLabel::Entailment,
            (false, false) => NliLabel::Neutral,
        }
    }

    #[test]
    fn nli_aggregation_exhaustive() {
        for t in 0..=5u32 {
            for code in 0..3usize.pow(t) {
                let labels: Vec<NliLabel> = (0..t)
                    .map(|p| NliLabel::ALL[(code / 3usize.pow(p)) % 3])
                    .collect();
                assert_eq!(aggregate_nli_labels(&labels), rule_oracle(&labels));
            }
        }
    }

    proptest! {
        #[test]
        fn ratio_symmetric_and_bounded(a in "[abc]{0,8}", b in "[abc]{0,8}") {
            let r = edit_distance_ratio(&a, &b);
            prop_assert_eq!(r, edit_distance_ratio(&b, &a));
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert_eq!(r == 1.0, a == b);
        }

        #[test]
        fn bleu_independent_of_key_labels(texts in prop::collection::vec(("[ab]( [ab]){0,4}", "[ab]( [ab]){0,4}"), 1..6), shift in 0usize..10) {
            let hyps: BTreeMap<usize, Vec<String>> = texts.iter().enumerate().map(|(i, (h, _))| (i, vec![h.clone()])).collect();
            let refs: BTreeMap<usize, Vec<String>> = texts.iter().enumerate().map(|(i, (_, r))| (i, vec![r.clone()])).collect();
            let n = texts.len();
            let relabel = |m: &BTreeMap<usize, Vec<String>>| -> BTreeMap<usize, Vec<String>> {
                m.iter().map(|(k, v)| ((k + shift) % n, v.clone())).collect()
            };
            let a = bleu(&hyps, &refs, 2).unwrap().score;
            let b = bleu(&relabel(&hyps), &relabel(&refs), 2).unwrap().score;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
