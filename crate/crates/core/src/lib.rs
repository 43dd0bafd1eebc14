//! Building blocks for discourse-aware commonsense inference over narratives.
//!
//! The crate covers everything except the neural generation model: loading
//! an if-then knowledge base, reading and splitting story corpora, language
//! model scoring interfaces with small reference implementations, the silver
//! supervision pipeline, retrieval baselines and the evaluation metrics.

pub mod baselines;
pub mod chunk;
pub mod corpus;
pub mod eval;
pub mod hashing;
pub mod kb;
pub mod lm;
pub mod supervision;
pub mod synthetic;

pub use corpus::Story;
pub use kb::{AtomicTriple, Dimension, DimensionGroup, KnowledgeBase};
pub use supervision::{Candidate, SilverDataset, Source};
