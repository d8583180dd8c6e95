use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("no visible keypoints")]
    EmptyMask,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("capacity exceeded: {needed} joints but embedding table holds {capacity}")]
    Capacity { needed: usize, capacity: usize },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("alignment needs at least 3 visible points, got {0}")]
    InsufficientPoints(usize),

    #[error("degenerate geometry: cross-covariance rank {0} does not identify a rotation")]
    DegenerateGeometry(usize),

    #[error("non-finite gradient in tensor `{0}`")]
    NumericFault(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid dataset spec: {0}")]
    Spec(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
