use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CoraError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoraError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("reference error: {0}")]
    Reference(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("sequence of length {len} exceeds the maximum of {max}")]
    Length { len: usize, max: usize },

    #[error("injection error: {0}")]
    Injection(String),

    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("frozen parameters changed: {0}")]
    Contamination(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing artifact {path}: {msg}")]
    MissingArtifact { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoraError {
    pub fn dim(msg: impl Into<String>) -> Self {
        Self::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }
}
