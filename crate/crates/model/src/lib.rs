//! Discourse-aware inference generator: a small causal transformer that
//! reads a story plus sentence and dimension control tokens and generates a
//! templated inference, optionally consulting a memory of earlier
//! inferences about the same story.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod memory;
pub mod model;
pub mod tape;
pub mod train;
pub mod vocab;

use thiserror::Error;

pub use config::{MemoryPolicy, ModelConfig, Variant};
pub use decode::{beam_search, decode_story, DecodedKey, Hypothesis};
pub use memory::{memory_retrieve, memory_summarize, reweigh_context, MemoryBank};
pub use model::{encode_input, ForwardInput, MemoryInput, Model};
pub use train::{build_examples, ExampleSet, TrainConfig, TrainState, Trainer};
pub use vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("sequence of {len} tokens exceeds the context length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: u64, loss: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
