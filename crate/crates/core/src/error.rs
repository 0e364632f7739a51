//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed volume file {path}: {reason}")]
    MalformedVolume { path: PathBuf, reason: String },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("degenerate intensity range: low and high percentiles coincide at {value}")]
    DegenerateIntensityRange { value: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty cohort")]
    EmptyCohort,

    #[error("undefined surface distance: {0}")]
    UndefinedSurfaceDistance(String),

    #[error("insufficient pairs: need at least 5 nonzero differences, got {0}")]
    InsufficientPairs(usize),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at batch {batch_index}: {detail}")]
    NonFiniteLoss { batch_index: u64, detail: String },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("infeasible phantom spec: {0}")]
    InfeasiblePhantom(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::MalformedVolume {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
