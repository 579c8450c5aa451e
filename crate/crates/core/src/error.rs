use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated tensor file: record {record} is incomplete ({detail})")]
    Truncated { record: usize, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate image_id {0:?}")]
    DuplicateId(String),

    #[error("unknown image_id {0:?}")]
    UnknownId(String),

    #[error("depth mismatch: expected {expected}, found {found}")]
    DepthMismatch { expected: usize, found: usize },

    #[error("missing {what} for image {image_id:?}")]
    Missing { what: &'static str, image_id: String },

    #[error("not enough positions for PCA: {0} (need at least 2)")]
    TooFewPositions(u64),

    #[error("covariance is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
