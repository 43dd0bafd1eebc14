//! Beam-search decoding of every (sentence, dimension) pair of a story.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use discourse_core::corpus::Story;
use discourse_core::kb::TemplateTable;
use discourse_core::Dimension;

use crate::memory::MemoryBank;
use crate::model::{encode_input, ForwardInput, MemoryInput, Model};
use crate::vocab::EOS;
use crate::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, EOS excluded.
    pub tokens: Vec<u32>,
    /// Log-probability divided by the number of generated tokens (EOS included).
    pub score: f64,
    /// True when the hypothesis hit the length limit without EOS.
    pub truncated: bool,
}

/// Beam search after `prefix`.
///
/// Every live hypothesis is expanded with every token; candidates are
/// ranked by length-normalized log-probability (ties by beam position,
/// then token id) and the best `beam` survive. Candidates ending in EOS
/// are set aside as finished. Search stops once `beam` hypotheses have
/// finished or after `max_len` tokens; unfinished survivors are then
/// returned flagged as truncated.
pub fn beam_search(
    model: &Model,
    prefix: &[u32],
    context_len: usize,
    memory: Option<&Array2<f64>>,
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>, ModelError> {
    if beam == 0 {
        return Err(ModelError::Config("beam must be positive".into()));
    }
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let len = (step + 1) as f64;
        let mut candidates: Vec<(f64, usize, u32, f64)> = Vec::new();
        for (b, (tokens, sum)) in live.iter().enumerate() {
            let mut input = prefix.to_vec();
            input.extend(tokens);
            let lp = model.next_token_log_probs(&ForwardInput {
                tokens: &input,
                context_len,
                memory: memory.map_or(MemoryInput::None, MemoryInput::Summary),
            })?;
            for (tok, &l) in lp.iter().enumerate() {
                candidates.push(((sum + l) / len, b, tok as u32, sum + l));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        for (score, b, tok, sum) in candidates.into_iter().take(beam) {
            let tokens = live[b].0.clone();
            if tok == EOS {
                finished.push(Hypothesis {
                    tokens,
                    score,
                    truncated: false,
                });
            } else {
                let mut t = tokens;
                t.push(tok);
                next.push((t, sum));
            }
        }
        live = next;
        if finished.len() >= beam || live.is_empty() {
            break;
        }
    }
    finished.sort_by(|a, b| b.score.total_cmp(&a.score));
    if finished.len() < beam {
        let mut rest: Vec<Hypothesis> = live
            .into_iter()
            .map(|(tokens, sum)| Hypothesis {
                score: sum / tokens.len().max(1) as f64,
                tokens,
                truncated: true,
            })
            .collect();
        rest.sort_by(|a, b| b.score.total_cmp(&a.score));
        finished.extend(rest);
    }
    finished.truncate(beam);
    Ok(finished)
}

/// Generated text with the dimension's template removed.
pub fn inference_text(model: &Model, dimension: Dimension, tokens: &[u32]) -> String {
    let text = model.vocab.decode(tokens);
    TemplateTable::default().strip(dimension, &text).trim().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedKey {
    pub story_id: String,
    pub sentence_idx: usize,
    pub dimension: Dimension,
    pub beam: Vec<String>,
    pub scores: Vec<f64>,
    pub truncated: Vec<bool>,
}

/// Decodes sentences in order and dimensions in enumeration order. With
/// memory at decode time, the top hypothesis of each pair is appended to a
/// per-story bank that starts empty.
pub fn decode_story(model: &Model, story: &Story, beam: usize) -> Result<Vec<DecodedKey>, ModelError> {
    let budget = model.config.context_len - model.config.max_decode;
    let mut bank = MemoryBank::unbounded(model.config.memory_tokens);
    let use_memory = model.config.memory_at_decode();
    let mut out = Vec::with_capacity(story.len() * Dimension::ALL.len());
    for i in 0..story.len() {
        for d in Dimension::ALL {
            let (prefix, _) = encode_input(story, i, d, &model.vocab, budget)?;
            let summary = if use_memory { model.memory_summary(&bank) } else { None };
            let hyps = beam_search(model, &prefix, prefix.len(), summary.as_ref(), beam, model.config.max_decode)?;
            if use_memory {
                if let Some(top) = hyps.first() {
                    bank.update(std::slice::from_ref(&top.tokens));
                }
            }
            out.push(DecodedKey {
                story_id: story.id.clone(),
                sentence_idx: i,
                dimension: d,
                beam: hyps.iter().map(|h| inference_text(model, d, &h.tokens)).collect(),
                scores: hyps.iter().map(|h| h.score).collect(),
                truncated: hyps.iter().map(|h| h.truncated).collect(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Variant};
    use crate::vocab::Vocabulary;

    fn story() -> Story {
        Story::new("s", (0..5).map(|k| format!("word{k} is here.")).collect())
    }

    fn model(variant: Variant, seed: u64) -> Model {
        let vocab = Vocabulary::from_corpus(&[story()], &["PersonX wants: to rest".into()]);
        let config = ModelConfig {
            variant,
            memory_tokens: 8,
            max_decode: 6,
            init_std: 0.5,
            seed,
            ..ModelConfig::tiny()
        };
        Model::new(config, vocab).unwrap()
    }

    /// Repeated argmax, first index on ties.
    fn greedy(model: &Model, prefix: &[u32], memory: Option<&Array2<f64>>, max_len: usize) -> Vec<u32> {
        let mut out = Vec::new();
        for _ in 0..max_len {
            let mut input = prefix.to_vec();
            input.extend(&out);
            let lp = model
                .next_token_log_probs(&ForwardInput {
                    tokens: &input,
                    context_len: prefix.len(),
                    memory: memory.map_or(MemoryInput::None, MemoryInput::Summary),
                })
                .unwrap();
            let mut best = 0;
            for (i, &v) in lp.iter().enumerate() {
                if v > lp[best] {
                    best = i;
                }
            }
            if best as u32 == EOS {
                break;
            }
            out.push(best as u32);
        }
        out
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..5 {
            let m = model(Variant::Memoryless, seed);
            let (prefix, _) = encode_input(&story(), 2, Dimension::XWant, &m.vocab, 50).unwrap();
            let hyps = beam_search(&m, &prefix, prefix.len(), None, 1, 6).unwrap();
            assert_eq!(hyps.len(), 1);
            assert_eq!(hyps[0].tokens, greedy(&m, &prefix, None, 6));
        }
    }

    #[test]
    fn story_yields_45_keys() {
        let m = model(Variant::Memory, 1);
        let out = decode_story(&m, &story(), 1).unwrap();
        assert_eq!(out.len(), 45);
        assert!(out.iter().all(|k| k.beam.len() == 1 && k.scores.len() == 1));
        let again = decode_story(&m, &story(), 1).unwrap();
        assert_eq!(out, again);

        let wide = decode_story(&m, &story(), 10).unwrap();
        assert_eq!(wide.len(), 45);
        for k in &wide {
            assert!(!k.beam.is_empty() && k.beam.len() <= 10);
            assert!(k.scores.windows(2).all(|w| w[0] >= w[1] || k.truncated.iter().any(|&t| t)));
        }
    }

    #[test]
    fn truncated_hypotheses_are_flagged() {
        let mut m = model(Variant::Memoryless, 3);
        // Make EOS unreachable.
        let lm_b = m.param_index("lm_b").unwrap();
        m.params_mut()[lm_b][[0, EOS as usize]] = -1e9;
        let (prefix, _) = encode_input(&story(), 0, Dimension::XNeed, &m.vocab, 50).unwrap();
        let hyps = beam_search(&m, &prefix, prefix.len(), None, 3, 4).unwrap();
        assert_eq!(hyps.len(), 3);
        assert!(hyps.iter().all(|h| h.truncated && h.tokens.len() == 4));
    }

    #[test]
    fn zero_projection_decodes_like_memoryless() {
        let mut mem = model(Variant::Memory, 4);
        mem.zero_projection();
        let mut plain = mem.clone();
        plain.config.variant = Variant::Memoryless;
        assert_eq!(decode_story(&mem, &story(), 2).unwrap(), decode_story(&plain, &story(), 2).unwrap());
    }

    #[test]
    fn train_only_memory_is_not_used_at_decode() {
        let m = model(Variant::Memory, 5);
        let mut train_only = m.clone();
        train_only.config.memory_policy = crate::config::MemoryPolicy::TrainOnly;
        let mut plain = m.clone();
        plain.config.variant = Variant::Memoryless;
        assert_eq!(decode_story(&train_only, &story(), 1).unwrap(), decode_story(&plain, &story(), 1).unwrap());
    }
}
