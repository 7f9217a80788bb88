//! Desk-scale toolkit for adapting an English decoder-only LLM to Hindi.
//!
//! The crate covers the whole adaptation recipe as independent, testable
//! pieces:
//!
//! - [`pipeline`]: detokenisation, heuristic filtering and cleaning of raw
//!   Hindi web text, with a per-rule audit trail.
//! - [`dedup`]: MinHash/LSH near-duplicate removal with an exact-Jaccard
//!   oracle.
//! - [`bpe`]: byte-level BPE training, vocabulary extension and tokenizer
//!   fertility evaluation.
//! - [`embed`]: similarity-weighted initialization of embedding rows for
//!   newly added tokens.
//! - [`tensor`] / [`model`]: a flat named-tensor checkpoint container, a
//!   reference decoder forward pass (RMSNorm, RoPE, grouped-query
//!   attention, SwiGLU) and identity-preserving block-expansion surgery.
//! - [`data`]: bilingual stream mixing, fixed-length sequence packing,
//!   chat templating with prompt loss masking, oversampling, and the
//!   training-recipe manifest.
//! - [`eval`]: zero-shot multiple-choice scoring by normalized
//!   log-likelihood and the pairwise judge protocol.
//!
//! Numeric code is generic over the scalar type through [`tensor::Scalar`];
//! `f32` and `f64` aliases for the common containers live at the crate root.

pub mod bpe;
pub mod data;
pub mod dedup;
pub mod doc;
pub mod embed;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};

/// Single-precision embedding table, the dtype used by real checkpoints.
pub type EmbeddingMatrixF32 = embed::EmbeddingMatrix<f32>;
/// Double-precision embedding table, used where test oracles need headroom.
pub type EmbeddingMatrixF64 = embed::EmbeddingMatrix<f64>;
/// Single-precision checkpoint (manifest + payload).
pub type CheckpointF32 = tensor::Checkpoint<f32>;
/// Double-precision checkpoint.
pub type CheckpointF64 = tensor::Checkpoint<f64>;
