//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cardinality error: {0}")]
    Cardinality(String),

    #[error("loss tensor must be 1x1, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("tensor does not belong to this tape")]
    DetachedTensor,

    #[error("episode contains no videos")]
    EmptyEpisode,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("sequence too short: need at least {min} frames, got {got}")]
    TooShort { min: usize, got: usize },

    #[error("coherence window {delta} must be smaller than sequence length {frames}")]
    BadWindow { delta: usize, frames: usize },

    #[error("distance matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("unknown metric `{0}`")]
    UnknownMetric(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("too few points: need at least {need}, got {got}")]
    TooFewPoints { need: usize, got: usize },

    #[error("bad magic bytes: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },

    #[error("truncated file: expected {expected} bytes of payload, got {got}")]
    TruncatedFile { expected: usize, got: usize },

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("non-finite loss at step {step}: ce={ce} aux={aux} tcr={tcr}")]
    NonFiniteLoss { step: usize, ce: f64, aux: f64, tcr: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
