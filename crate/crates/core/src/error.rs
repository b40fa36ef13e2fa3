//! Errors of the I/O-facing parts of the crate.

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("{0} already exists; pass overwrite to replace it")]
    Exists(PathBuf),
    /// A checkpoint does not match the requested model; lists `field: ours vs theirs`.
    #[error("checkpoint does not match the model configuration: {}", .0.join(", "))]
    Mismatch(Vec<String>),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.into();
        move |source| Self::Json { path, source }
    }

    /// True for failures caused by numerics rather than input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Self::NonFiniteLoss { .. } | Self::Tensor(TensorError::NonFinite { .. }))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
