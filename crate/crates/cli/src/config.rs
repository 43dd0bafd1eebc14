//! Run configuration: a TOML file merged with command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use discourse_core::eval::DEFAULT_NOVELTY_THRESHOLD;
use discourse_core::supervision::SupervisionConfig;
use discourse_model::{ModelConfig, TrainConfig};

use crate::CliError;

/// How candidates are scored for coherence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    /// `ngram` (fit on the story corpus), `uniform`, or `command`.
    pub kind: String,
    pub order: usize,
    /// Vocabulary size for the uniform scorer.
    pub vocab: usize,
    /// Shell command speaking the line protocol, for `kind = "command"`.
    pub command: Option<String>,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            kind: "ngram".into(),
            order: 3,
            vocab: 50257,
            command: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    pub beam: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings { beam: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub novelty_threshold: f64,
    pub include_heads: bool,
    /// `lexical`, or `constant:<label>`.
    pub nli: String,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            novelty_threshold: DEFAULT_NOVELTY_THRESHOLD,
            include_heads: false,
            nli: "lexical".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    pub embedding_dim: usize,
    pub k: usize,
    pub beam: usize,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings {
            embedding_dim: 256,
            k: 1,
            beam: 10,
        }
    }
}

/// Everything that shapes an artifact. Serialized into every output header;
/// `workers` is left out so thread count never changes output bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing)]
    pub workers: usize,
    /// Keep only the first `window` sentences of each story (0 = all).
    pub window: usize,
    pub supervision: SupervisionConfig,
    pub scorer: ScorerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeSettings,
    pub eval: EvalSettings,
    pub baseline: BaselineSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            workers: 1,
            window: 0,
            supervision: SupervisionConfig::default(),
            scorer: ScorerConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeSettings::default(),
            eval: EvalSettings::default(),
            baseline: BaselineSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                RunConfig::from_toml(&text)
            }
        }
    }

    /// Pushes the shared seed and worker count into the nested sections
    /// and checks value ranges.
    pub fn finalize(mut self) -> Result<Self, CliError> {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.workers = self.workers.max(1);
        self.supervision.workers = self.workers;
        self.train.workers = self.workers;
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.decode.beam == 0 || self.baseline.beam == 0 || self.baseline.k == 0 {
            return Err(CliError::Usage("beam sizes and k must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.novelty_threshold) {
            return Err(CliError::Usage("novelty_threshold must lie in [0, 1]".into()));
        }
        if self.scorer.order == 0 || self.scorer.vocab == 0 {
            return Err(CliError::Usage("scorer order and vocab must be positive".into()));
        }
        Ok(self)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
