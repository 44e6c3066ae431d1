use thiserror::Error;

/// Errors raised across the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A profile or experiment configuration violates its invariants.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was called outside its contract (empty input, wrong state).
    #[error("usage error: {0}")]
    Usage(String),
    /// A linear-algebra routine failed (e.g. Cholesky of a non-PD matrix).
    #[error("numerical error: {0}")]
    Numerical(String),
    /// A dataset or checkpoint file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
