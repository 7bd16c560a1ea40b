//! Self-context adaptation for a tiny visual language model, at desk scale.
//!
//! Embeddings are clustered, clusters receive semantically unrelated names,
//! and interleaved image/caption episodes built from those names teach a
//! small decoder to bind new words to visual concepts from context alone.

pub mod cluster;
pub mod context;
pub mod embed_store;
pub mod error;
pub mod eval;
pub mod exec;
pub mod jsonl;
pub mod lexicon;
pub mod model;
pub mod names;
pub mod pipeline;
pub mod train;
pub mod workspace;

pub use error::{Error, Result};
pub use exec::Executor;
