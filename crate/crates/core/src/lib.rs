//! embedkit: a desk-scale contrastive-learning toolkit for text embeddings.
//!
//! The crate covers the full training loop of a toy instruction-aware
//! embedding model and the surrounding machinery:
//!
//! - [`corpus`] — training-sample data model, JSONL ingestion, and a seeded
//!   synthetic corpus generator
//! - [`encoder`] — byte-level tokenizer and a small causal transformer with
//!   last-token pooling, forward and manual backward passes
//! - [`loss`] — class-aware masked InfoNCE with analytic gradients
//! - [`grad_cache`] — two-pass gradient-cached training step for large
//!   effective batch sizes
//! - [`trainer`] — Adam training loop with checkpoint persistence
//! - [`merge`] — SLERP checkpoint merging
//! - [`mining`] — percentage-margin hard-negative mining and triplet
//!   construction from labeled pairs
//! - [`fp8`] — simulated e4m3 quantization (per-tensor and per-block) with an
//!   accuracy-impact report
//! - [`eval`] — retrieval recall/nDCG and classification accuracy harness

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fp8;
pub mod grad_cache;
pub mod loss;
pub mod merge;
pub mod mining;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
