//! Causal transformer with an optional memory read on the final hidden state.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use discourse_core::corpus::Story;
use discourse_core::Dimension;

use crate::config::ModelConfig;
use crate::memory::{memory_summarize, select_rows, MemoryBank};
use crate::tape::{Tape, Var};
use crate::vocab::Vocabulary;
use crate::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_out: usize,
    b_out: usize,
}

#[derive(Debug, Clone)]
struct Ids {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIds>,
    lnf_g: usize,
    lnf_b: usize,
    lm_w: usize,
    lm_b: usize,
    mem_emb: usize,
    proj_w: usize,
    proj_b: usize,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

type ParamSpec = (String, (usize, usize), Init);

/// Names and shapes of all parameters, in storage order.
fn layout(config: &ModelConfig, vocab: usize) -> (Vec<ParamSpec>, Ids) {
    let h = config.hidden;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: (usize, usize), init: Init| {
        specs.push((name, shape, init));
        specs.len() - 1
    };
    let tok_emb = push("tok_emb".into(), (vocab, h), Init::Normal);
    let pos_emb = push("pos_emb".into(), (config.context_len, h), Init::Normal);
    let mut layers = Vec::new();
    for l in 0..config.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        layers.push(LayerIds {
            ln1_g: push(p("ln1_g"), (1, h), Init::Ones),
            ln1_b: push(p("ln1_b"), (1, h), Init::Zeros),
            w_qkv: push(p("w_qkv"), (h, 3 * h), Init::Normal),
            b_qkv: push(p("b_qkv"), (1, 3 * h), Init::Zeros),
            w_o: push(p("w_o"), (h, h), Init::Normal),
            b_o: push(p("b_o"), (1, h), Init::Zeros),
            ln2_g: push(p("ln2_g"), (1, h), Init::Ones),
            ln2_b: push(p("ln2_b"), (1, h), Init::Zeros),
            w_fc: push(p("w_fc"), (h, 4 * h), Init::Normal),
            b_fc: push(p("b_fc"), (1, 4 * h), Init::Zeros),
            w_out: push(p("w_out"), (4 * h, h), Init::Normal),
            b_out: push(p("b_out"), (1, h), Init::Zeros),
        });
    }
    let lnf_g = push("lnf_g".into(), (1, h), Init::Ones);
    let lnf_b = push("lnf_b".into(), (1, h), Init::Zeros);
    let lm_w = push("lm_w".into(), (h, vocab), Init::Normal);
    let lm_b = push("lm_b".into(), (1, vocab), Init::Zeros);
    let mem_emb = push("mem_emb".into(), (vocab, h), Init::Normal);
    let proj_w = push("proj_w".into(), (h, h), Init::Normal);
    let proj_b = push("proj_b".into(), (1, h), Init::Zeros);
    let ids = Ids {
        tok_emb,
        pos_emb,
        layers,
        lnf_g,
        lnf_b,
        lm_w,
        lm_b,
        mem_emb,
        proj_w,
        proj_b,
    };
    (specs, ids)
}

/// Memory available to one forward pass.
pub enum MemoryInput<'a> {
    None,
    /// Token rows padded to `L^r`; embedded through `f_emb` on the tape.
    Rows(&'a [Vec<u32>]),
    /// Precomputed `θ^mem` (`R × H`); carries no gradient.
    Summary(&'a Array2<f64>),
}

/// One sequence for [`Model::forward`].
pub struct ForwardInput<'a> {
    pub tokens: &'a [u32],
    /// Length of the story-plus-control prefix averaged into `θ^ctx`.
    pub context_len: usize,
    pub memory: MemoryInput<'a>,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Final hidden state `C^o` before the memory read.
    pub hidden: Var,
    /// Memory rows read, when the memory path ran.
    pub selected: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    params: Vec<Array2<f64>>,
    info: Vec<ParamInfo>,
    ids: Ids,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self, ModelError> {
        config.validate()?;
        let (specs, ids) = layout(&config, vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).expect("validated std");
        let mut params = Vec::with_capacity(specs.len());
        let mut info = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let value = match init {
                Init::Normal => Array2::from_shape_simple_fn(shape, || normal.sample(&mut rng)),
                Init::Zeros => Array2::zeros(shape),
                Init::Ones => Array2::ones(shape),
            };
            params.push(value);
            info.push(ParamInfo { name, shape });
        }
        Ok(Model {
            config,
            vocab,
            params,
            info,
            ids,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: Vec<Array2<f64>>) -> Result<Self, ModelError> {
        let mut model = Model::new(config, vocab)?;
        if params.len() != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.dim() != model.info[i].shape {
                return Err(ModelError::Checkpoint(format!("shape mismatch for {}", model.info[i].name)));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.info.iter().position(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Array2::len).sum()
    }

    /// Sets the memory projection to the zero map.
    pub fn zero_projection(&mut self) {
        self.params[self.ids.proj_w].fill(0.0);
        self.params[self.ids.proj_b].fill(0.0);
    }

    /// `θ^mem` for a bank, computed outside the tape.
    pub fn memory_summary(&self, bank: &MemoryBank) -> Option<Array2<f64>> {
        if bank.is_empty() {
            None
        } else {
            Some(memory_summarize(&bank.embed(&self.params[self.ids.mem_emb])))
        }
    }

    fn p(&self, tape: &mut Tape, id: usize) -> Var {
        tape.param(id, self.params[id].clone())
    }

    /// Builds the forward graph on `tape`. The memory path runs only for
    /// the memory variant with a non-empty bank; otherwise the graph is the
    /// plain causal transformer.
    pub fn forward(&self, tape: &mut Tape, input: &ForwardInput<'_>) -> Result<ForwardOutput, ModelError> {
        let n = input.tokens.len();
        if n == 0 {
            return Err(ModelError::Precondition("empty input sequence".into()));
        }
        if n > self.config.context_len {
            return Err(ModelError::SequenceTooLong {
                len: n,
                max: self.config.context_len,
            });
        }
        let h = self.config.hidden;
        let heads = self.config.heads;
        let dh = h / heads;
        let ids: Vec<usize> = input.tokens.iter().map(|&t| t as usize).collect();
        if let Some(bad) = ids.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(ModelError::Precondition(format!("token id {bad} outside the vocabulary")));
        }
        let positions: Vec<usize> = (0..n).collect();

        let tok = self.p(tape, self.ids.tok_emb);
        let tok = tape.gather(tok, &ids);
        let pos = self.p(tape, self.ids.pos_emb);
        let pos = tape.gather(pos, &positions);
        let mut x = tape.add(tok, pos);

        for l in &self.ids.layers {
            let g = self.p(tape, l.ln1_g);
            let b = self.p(tape, l.ln1_b);
            let a = tape.layer_norm(x, g, b);
            let w = self.p(tape, l.w_qkv);
            let bq = self.p(tape, l.b_qkv);
            let qkv = tape.matmul(a, w);
            let qkv = tape.add_row(qkv, bq);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = tape.slice_cols(qkv, hd * dh, dh);
                let k = tape.slice_cols(qkv, h + hd * dh, dh);
                let v = tape.slice_cols(qkv, 2 * h + hd * dh, dh);
                let s = tape.matmul_t(q, k);
                let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
                let att = tape.causal_softmax(s);
                outs.push(tape.matmul(att, v));
            }
            let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
            let wo = self.p(tape, l.w_o);
            let bo = self.p(tape, l.b_o);
            let o = tape.matmul(cat, wo);
            let o = tape.add_row(o, bo);
            x = tape.add(x, o);

            let g = self.p(tape, l.ln2_g);
            let b = self.p(tape, l.ln2_b);
            let a = tape.layer_norm(x, g, b);
            let w1 = self.p(tape, l.w_fc);
            let b1 = self.p(tape, l.b_fc);
            let f = tape.matmul(a, w1);
            let f = tape.add_row(f, b1);
            let f = tape.gelu(f);
            let w2 = self.p(tape, l.w_out);
            let b2 = self.p(tape, l.b_out);
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, b2);
            x = tape.add(x, f);
        }

        let g = self.p(tape, self.ids.lnf_g);
        let b = self.p(tape, self.ids.lnf_b);
        let hidden = tape.layer_norm(x, g, b);
        let mut c = hidden;

        let mut selected = None;
        if self.config.memory_at_train() {
            let theta_mem = match input.memory {
                MemoryInput::None => None,
                MemoryInput::Rows([]) => None,
                MemoryInput::Rows(rows) => {
                    let row_len = self.config.memory_tokens;
                    let mut flat = Vec::with_capacity(rows.len() * row_len);
                    for r in rows {
                        if r.len() != row_len {
                            return Err(ModelError::Precondition(format!(
                                "memory row of length {} (expected {row_len})",
                                r.len()
                            )));
                        }
                        flat.extend(r.iter().map(|&t| t as usize));
                    }
                    let f_emb = self.p(tape, self.ids.mem_emb);
                    let emb = tape.gather(f_emb, &flat);
                    Some(tape.block_mean(emb, row_len))
                }
                MemoryInput::Summary(s) if s.nrows() == 0 => None,
                MemoryInput::Summary(s) => Some(tape.leaf(s.clone())),
            };
            if let Some(theta_mem) = theta_mem {
                let ctx_rows: Vec<usize> = (0..input.context_len.clamp(1, n)).collect();
                let theta_ctx = tape.mean_rows(hidden, &ctx_rows);
                let sel = select_rows(
                    tape.value(theta_ctx).row(0),
                    tape.value(theta_mem).view(),
                    self.config.retrieve_k,
                );
                let m_o = tape.mean_rows(theta_mem, &sel);
                let pw = self.p(tape, self.ids.proj_w);
                let pb = self.p(tape, self.ids.proj_b);
                let proj = tape.matmul(m_o, pw);
                let proj = tape.add_row(proj, pb);
                c = tape.add_row(c, proj);
                selected = Some(sel);
            }
        }

        let w = self.p(tape, self.ids.lm_w);
        let b = self.p(tape, self.ids.lm_b);
        let logits = tape.matmul(c, w);
        let logits = tape.add_row(logits, b);
        Ok(ForwardOutput { logits, hidden, selected })
    }

    /// Logits of every position, without gradients.
    pub fn logits(&self, input: &ForwardInput<'_>) -> Result<Array2<f64>, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Log-probabilities of the next token after `tokens`.
    pub fn next_token_log_probs(&self, input: &ForwardInput<'_>) -> Result<Array1<f64>, ModelError> {
        let logits = self.logits(input)?;
        let last = logits.row(logits.nrows() - 1);
        let max = last.fold(f64::NEG_INFINITY, |m, &e| m.max(e));
        let lse = max + last.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
        Ok(last.mapv(|e| e - lse))
    }
}

/// Story tokens followed by the sentence and dimension markers. When the
/// result would exceed `budget`, tokens are dropped from the start of the
/// story; the markers are always kept. Returns the tokens and how many were
/// dropped.
pub fn encode_input(
    story: &Story,
    i: usize,
    dimension: Dimension,
    vocab: &Vocabulary,
    budget: usize,
) -> Result<(Vec<u32>, usize), ModelError> {
    if i >= story.len() {
        return Err(ModelError::Precondition(format!(
            "sentence index {i} out of range for a story of {} sentences",
            story.len()
        )));
    }
    if budget < 2 {
        return Err(ModelError::Precondition("budget leaves no room for control tokens".into()));
    }
    let mut tokens: Vec<u32> = story.sentences.iter().flat_map(|s| vocab.encode_words(s)).collect();
    let dropped = tokens.len().saturating_sub(budget - 2);
    tokens.drain(..dropped);
    tokens.push(vocab.sentence(i)?);
    tokens.push(vocab.dimension(dimension));
    Ok((tokens, dropped))
}
