use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, counts or ratios that cannot describe a valid model or run.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("kernel matrix is numerically singular (Cholesky failed with jitter up to {jitter:e})")]
    NumericalSingularity { jitter: f64 },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("rejected optimizer step: {0}")]
    NonFiniteGradient(String),

    #[error("dataset error in {path}: {detail}")]
    Dataset { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
