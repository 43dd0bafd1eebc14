use serde::{Deserialize, Serialize};

use crate::ModelError;

pub const DEFAULT_MEMORY_ROWS: usize = 45;
pub const DEFAULT_MEMORY_TOKENS: usize = 100;
pub const DEFAULT_RETRIEVE_K: usize = 1;
pub const DEFAULT_MAX_DECODE: usize = 50;
pub const DEFAULT_CONTEXT_LEN: usize = 512;
pub const BEAM_SIZES: [usize; 2] = [1, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Memoryless,
    Memory,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "memoryless" => Ok(Variant::Memoryless),
            "memory" => Ok(Variant::Memory),
            other => Err(format!("unknown variant `{other}` (expected memoryless or memory)")),
        }
    }
}

/// Whether the memory bank is consulted at decode time as well as in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryPolicy {
    TrainAndDecode,
    TrainOnly,
}

impl std::str::FromStr for MemoryPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train-and-decode" | "train+decode" => Ok(MemoryPolicy::TrainAndDecode),
            "train-only" => Ok(MemoryPolicy::TrainOnly),
            other => Err(format!("unknown memory policy `{other}` (expected train-and-decode or train-only)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum sequence length (positions).
    pub context_len: usize,
    /// Training-time memory capacity `R^m`.
    pub memory_rows: usize,
    /// Tokens per memory row `L^r`.
    pub memory_tokens: usize,
    pub retrieve_k: usize,
    pub variant: Variant,
    pub memory_policy: MemoryPolicy,
    pub max_decode: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 128,
            layers: 2,
            heads: 2,
            context_len: DEFAULT_CONTEXT_LEN,
            memory_rows: DEFAULT_MEMORY_ROWS,
            memory_tokens: DEFAULT_MEMORY_TOKENS,
            retrieve_k: DEFAULT_RETRIEVE_K,
            variant: Variant::Memory,
            memory_policy: MemoryPolicy::TrainAndDecode,
            max_decode: DEFAULT_MAX_DECODE,
            init_std: 0.02,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and toy corpora.
    pub fn tiny() -> Self {
        ModelConfig {
            hidden: 32,
            layers: 2,
            heads: 2,
            context_len: 128,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("context_len", self.context_len),
            ("memory_rows", self.memory_rows),
            ("memory_tokens", self.memory_tokens),
            ("retrieve_k", self.retrieve_k),
            ("max_decode", self.max_decode),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.retrieve_k > self.memory_rows {
            return Err(ModelError::Config("retrieve_k must not exceed memory_rows".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(ModelError::Config("hidden must be divisible by heads".into()));
        }
        if self.context_len <= self.max_decode + 2 {
            return Err(ModelError::Config("context_len must leave room for control tokens and decoding".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(ModelError::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    /// Whether decoding consults the memory bank.
    pub fn memory_at_decode(&self) -> bool {
        self.variant == Variant::Memory && self.memory_policy == MemoryPolicy::TrainAndDecode
    }

    pub fn memory_at_train(&self) -> bool {
        self.variant == Variant::Memory
    }
}
