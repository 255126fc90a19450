use std::path::PathBuf;

use intensim_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("label count {found} does not match point count {expected}")]
    LabelMismatch { expected: usize, found: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("modality {0} is not available for this data")]
    ModalityUnavailable(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("need at least {needed} points, got {available}")]
    InsufficientPoints { needed: usize, available: usize },
    #[error("invalid point: {0}")]
    InvalidPoint(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training fault: {0}")]
    TrainingFault(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Broad category used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::ModalityUnavailable(_) => ErrorKind::Config,
            Error::TrainingFault(_) => ErrorKind::TrainingFault,
            Error::Tensor(TensorError::NonFinite(_)) => ErrorKind::TrainingFault,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    TrainingFault,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
