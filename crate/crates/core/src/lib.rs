//! A desk-scale deliberate-thinking dense retriever.
//!
//! A small causal transformer bi-encoder that represents documents through a
//! chain of deliberation: `m` learned prompt tokens appended after the
//! document so the model emits `m` successive "thinking step" embeddings.
//! Training combines a max-over-steps contrastive loss with a self-distillation
//! KL loss that pulls the final-step ranking distribution toward the
//! best-step distribution. The crate also ships exact top-k cosine retrieval,
//! TREC-convention evaluation, and embedding diagnostics.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod index;
pub mod loss;
pub mod model;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
