//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },

    #[error("line {line}: {violation}")]
    InvalidSample { line: usize, violation: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint manifest error: {0}")]
    Manifest(String),

    #[error("antipodal inputs: slerp geodesic is undefined")]
    Antipodal,

    #[error("nan code at index {index} in quantized tensor")]
    NanCode { index: usize },

    #[error("chunk plan mismatch: {0}")]
    ChunkPlan(String),

    #[error("classification triplets require at least two distinct labels")]
    SingleLabel,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
