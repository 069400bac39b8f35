use std::path::PathBuf;

use mmdc_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid config: `{field}`: expected {expected}, got {actual}")]
    Config {
        field: String,
        expected: String,
        actual: String,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("protected layer {0} cannot be pruned")]
    ProtectedLayerPruned(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint hash mismatch: manifest says {expected}, blob hashes to {actual} ({len} bytes, expected {expected_len})")]
    HashMismatch {
        expected: String,
        actual: String,
        len: usize,
        expected_len: usize,
    },

    #[error("missing artifact {path}: run stage `{stage}` first")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("output directory {0} is locked by another pipeline")]
    Locked(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, expected: impl Into<String>, actual: impl ToString) -> Self {
        Error::Config {
            field: field.into(),
            expected: expected.into(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is numeric (non-finite values during training).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Tensor(TensorError::NonFinite { .. }))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
