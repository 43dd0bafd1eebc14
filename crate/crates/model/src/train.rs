//! Training on silver records: example construction, Adam with linear
//! warmup, gradient accumulation.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use discourse_core::corpus::Story;
use discourse_core::kb::render_template;
use discourse_core::{Candidate, Dimension, SilverDataset};

use crate::memory::MemoryBank;
use crate::model::{encode_input, ForwardInput, MemoryInput, Model};
use crate::tape::Tape;
use crate::vocab::{Vocabulary, EOS, PAD};
use crate::ModelError;

/// One training sequence: context tokens followed by the templated
/// inference and EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub story_id: String,
    pub sentence_idx: usize,
    pub dimension: Dimension,
    pub tokens: Vec<u32>,
    pub context_len: usize,
    story: usize,
    memory_end: usize,
}

/// Examples plus, per story, the memory rows they draw on.
///
/// The memory of an example is the top-ranked silver inference of every
/// earlier (sentence, dimension) key of its story, most recent `R^m` only.
#[derive(Debug, Clone, Default)]
pub struct ExampleSet {
    pub examples: Vec<TrainingExample>,
    memories: Vec<Vec<Vec<u32>>>,
    memory_rows: usize,
    pub skipped_records: usize,
    pub truncated_contexts: usize,
    pub truncated_memory_rows: usize,
}

impl ExampleSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Memory rows visible to example `idx`, oldest first.
    pub fn memory(&self, idx: usize) -> &[Vec<u32>] {
        let e = &self.examples[idx];
        if self.memories.is_empty() {
            return &[];
        }
        let rows = &self.memories[e.story];
        &rows[e.memory_end.saturating_sub(self.memory_rows)..e.memory_end]
    }
}

/// Target tokens for an inference: template, inference words, EOS.
pub fn target_tokens(vocab: &Vocabulary, dimension: Dimension, inference: &str) -> Result<Vec<u32>, ModelError> {
    let templated = render_template(dimension, inference).map_err(|e| ModelError::Precondition(e.to_string()))?;
    let mut t = vocab.encode_words(&templated);
    t.push(EOS);
    Ok(t)
}

/// Templated texts of all records, for building a vocabulary.
pub fn templated_texts(silver: &SilverDataset) -> Vec<String> {
    silver
        .records
        .iter()
        .filter_map(|r| render_template(r.dimension, &r.inference).ok())
        .collect()
}

pub fn build_examples(
    silver: &SilverDataset,
    stories: &[Story],
    model: &Model,
) -> Result<ExampleSet, ModelError> {
    let config = &model.config;
    let vocab = &model.vocab;
    let by_id: HashMap<&str, (usize, &Story)> =
        stories.iter().enumerate().map(|(i, s)| (s.id.as_str(), (i, s))).collect();
    let mut grouped: BTreeMap<usize, BTreeMap<(usize, usize), Vec<&Candidate>>> = BTreeMap::new();
    let mut set = ExampleSet {
        memory_rows: config.memory_rows,
        ..Default::default()
    };
    for r in &silver.records {
        match by_id.get(r.story_id.as_str()) {
            Some(&(idx, story)) if r.sentence_idx < story.len() => grouped
                .entry(idx)
                .or_default()
                .entry((r.sentence_idx, r.dimension.index()))
                .or_default()
                .push(r),
            _ => set.skipped_records += 1,
        }
    }
    if set.skipped_records > 0 {
        log::warn!("{} silver records refer to unknown stories or sentences", set.skipped_records);
    }
    for (story_idx, keys) in grouped {
        let story = by_id[stories[story_idx].id.as_str()].1;
        let mut rows: Vec<Vec<u32>> = Vec::new();
        let slot = set.memories.len();
        for ((i, _), records) in keys {
            for r in &records {
                let target = target_tokens(vocab, r.dimension, &r.inference)?;
                let budget = config.context_len.saturating_sub(target.len());
                let (mut tokens, dropped) = encode_input(story, i, r.dimension, vocab, budget)?;
                if dropped > 0 {
                    set.truncated_contexts += 1;
                }
                let context_len = tokens.len();
                tokens.extend(target);
                set.examples.push(TrainingExample {
                    story_id: r.story_id.clone(),
                    sentence_idx: i,
                    dimension: r.dimension,
                    tokens,
                    context_len,
                    story: slot,
                    memory_end: rows.len(),
                });
            }
            if config.memory_at_train() {
                // Lowest-CE record first; ties keep file order.
                let best = records
                    .iter()
                    .min_by(|a, b| {
                        let ca = a.coherence_ce.unwrap_or(f64::INFINITY);
                        let cb = b.coherence_ce.unwrap_or(f64::INFINITY);
                        ca.total_cmp(&cb)
                    })
                    .expect("non-empty key");
                let mut bank = MemoryBank::unbounded(config.memory_tokens);
                let mut row = target_tokens(vocab, best.dimension, &best.inference)?;
                row.pop();
                bank.update(&[row]);
                set.truncated_memory_rows += bank.truncated();
                rows.extend(bank.rows());
            }
        }
        set.memories.push(rows);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub micro_batch: usize,
    pub accumulation: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    #[serde(skip, default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 6.25e-5,
            warmup_steps: 100,
            micro_batch: 4,
            accumulation: 4,
            grad_clip: Some(1.0),
            seed: 42,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.micro_batch == 0 || self.accumulation == 0 {
            return Err(ModelError::Config("micro_batch and accumulation must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ModelError::Config("learning_rate must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(ModelError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Examples per optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation
    }

    /// Linear warmup to `learning_rate`, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    #[serde(skip)]
    pub m: Vec<Array2<f64>>,
    #[serde(skip)]
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &[Array2<f64>]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-token cross-entropy in nats.
    pub loss: f64,
    pub steps: u64,
    pub tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub loss_log: Vec<EpochRecord>,
}

/// Input tokens and masked targets of a sequence right-padded to `len`.
fn padded_io(tokens: &[u32], len: usize) -> (Vec<u32>, Vec<Option<usize>>) {
    let mut full = tokens.to_vec();
    full.resize(len, PAD);
    let inputs = full[..len - 1].to_vec();
    let targets = full[1..]
        .iter()
        .map(|&t| if t == PAD { None } else { Some(t as usize) })
        .collect();
    (inputs, targets)
}

fn target_count(tokens: &[u32]) -> usize {
    tokens[1..].iter().filter(|&&t| t != PAD).count()
}

type SparseGrads = Vec<(usize, Array2<f64>)>;

/// Loss of one example scaled by `scale`, with per-parameter gradients.
fn example_gradients(
    model: &Model,
    set: &ExampleSet,
    idx: usize,
    padded_len: usize,
    scale: f64,
) -> Result<(f64, SparseGrads), ModelError> {
    let e = &set.examples[idx];
    let (inputs, targets) = padded_io(&e.tokens, padded_len);
    let mut tape = Tape::new();
    let memory = if model.config.memory_at_train() {
        MemoryInput::Rows(set.memory(idx))
    } else {
        MemoryInput::None
    };
    let out = model.forward(
        &mut tape,
        &ForwardInput {
            tokens: &inputs,
            context_len: e.context_len,
            memory,
        },
    )?;
    let loss = tape.cross_entropy(out.logits, &targets, scale);
    let value = tape.value(loss)[[0, 0]];
    Ok((value, tape.backward(loss)))
}

/// Summed scaled loss and gradients over `indices`, processed in
/// micro-batches of `micro_batch` (each right-padded to its longest
/// sequence). The loss is normalized by the non-PAD target count of the
/// whole group. Per-example results are summed in index order.
pub fn group_gradients(
    model: &Model,
    set: &ExampleSet,
    indices: &[usize],
    micro_batch: usize,
) -> Result<(f64, usize, Vec<Array2<f64>>), ModelError> {
    let tokens: usize = indices.iter().map(|&i| target_count(&set.examples[i].tokens)).sum();
    let scale = 1.0 / tokens.max(1) as f64;
    let mut grads: Vec<Array2<f64>> = model.params().iter().map(|p| Array2::zeros(p.raw_dim())).collect();
    let mut loss = 0.0;
    for micro in indices.chunks(micro_batch.max(1)) {
        let padded_len = micro.iter().map(|&i| set.examples[i].tokens.len()).max().unwrap_or(0);
        let results: Vec<_> = micro
            .par_iter()
            .map(|&i| example_gradients(model, set, i, padded_len, scale))
            .collect();
        for r in results {
            let (l, g) = r?;
            loss += l;
            for (id, d) in g {
                grads[id] += &d;
            }
        }
    }
    Ok((loss, tokens, grads))
}

fn clip(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    pub state: TrainState,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self, ModelError> {
        let adam = Adam::new(model.params());
        Trainer::resume(model, config, adam, TrainState::default())
    }

    pub fn resume(model: Model, config: TrainConfig, adam: Adam, state: TrainState) -> Result<Self, ModelError> {
        config.validate()?;
        if adam.m.len() != model.params().len() {
            return Err(ModelError::Checkpoint("optimizer state does not match the model".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers.max(1))
            .build()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(Trainer {
            model,
            config,
            adam,
            state,
            pool,
        })
    }

    /// One optimizer step over `indices`; returns (summed CE, target tokens).
    pub fn step(&mut self, set: &ExampleSet, indices: &[usize]) -> Result<(f64, usize), ModelError> {
        let micro = self.config.micro_batch;
        let model = &self.model;
        let (loss, tokens, mut grads) = self.pool.install(|| group_gradients(model, set, indices, micro))?;
        if !loss.is_finite() {
            return Err(ModelError::Divergence {
                step: self.state.step,
                loss,
            });
        }
        if let Some(c) = self.config.grad_clip {
            clip(&mut grads, c);
        }
        let lr = self.config.lr_at(self.state.step);
        self.adam.step(self.model.params_mut(), &grads, lr);
        self.state.step += 1;
        Ok((loss * tokens as f64, tokens))
    }

    /// One pass over `set` in a seeded shuffled order.
    pub fn run_epoch(&mut self, set: &ExampleSet) -> Result<EpochRecord, ModelError> {
        if set.is_empty() {
            return Err(ModelError::Precondition("no training examples".into()));
        }
        let epoch = self.state.epoch;
        let mut order: Vec<usize> = (0..set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut tokens = 0;
        let start_step = self.state.step;
        for group in order.chunks(self.config.effective_batch()) {
            let (l, t) = self.step(set, group)?;
            total += l;
            tokens += t;
        }
        let record = EpochRecord {
            epoch,
            loss: total / tokens.max(1) as f64,
            steps: self.state.step - start_step,
            tokens,
        };
        log::info!("epoch {epoch}: loss {:.4} over {} steps", record.loss, record.steps);
        self.state.loss_log.push(record.clone());
        self.state.epoch += 1;
        Ok(record)
    }

    /// Runs until `config.epochs` epochs have completed in total.
    pub fn train(&mut self, set: &ExampleSet) -> Result<&[EpochRecord], ModelError> {
        while self.state.epoch < self.config.epochs {
            self.run_epoch(set)?;
        }
        Ok(&self.state.loss_log)
    }
}
