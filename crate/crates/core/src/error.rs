//! Error type shared by every module of the crate.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by corpus construction, trigger optimization, training
/// and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize: vector norm {norm:e} is below 1e-12")]
    ZeroNorm { norm: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered during {context}")]
    NonFiniteEvaluation { context: String },
    #[error("degenerate covariance: input points carry no variance")]
    DegenerateCovariance,
    #[error("unknown label '{0}': no prototype registered")]
    UnknownLabel(String),
    #[error("text must be non-empty")]
    EmptyText,
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("bad template: {0}")]
    BadTemplate(String),
    #[error("text trigger must be non-empty")]
    EmptyTrigger,
    #[error("poisoning requires at least one trigger")]
    NoTrigger,
    #[error("invalid poisoning rate {0}; must be in (0, 1]")]
    InvalidRate(f64),
    #[error("dataset already contains poisoned samples")]
    AlreadyPoisoned,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("json error: {0}")]
    Json(String),
    #[error("patch out of bounds: {0}")]
    OutOfBounds(String),
    #[error("batch too small: need at least {need}, got {got}")]
    BatchTooSmall { need: usize, got: usize },
    #[error("pool too small: need at least {need}, got {got}")]
    PoolTooSmall { need: usize, got: usize },
    #[error("instruction set must be non-empty")]
    EmptyInstructionSet,
    #[error("search space too large: {size} candidates exceed limit {limit}")]
    SearchSpaceTooLarge { size: u64, limit: u64 },
    #[error("response '{0}' not in vocabulary")]
    UnknownResponse(String),
    #[error("evaluation set contains poisoned samples")]
    PoisonedEvalSet,
    #[error("invalid trigger spec: {0}")]
    InvalidSpec(String),
    #[error("dataset too small: need at least {need}, got {got}")]
    DatasetTooSmall { need: usize, got: usize },
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Json(err.to_string())
    }
}
