use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("non-finite gradient in parameter {index} ({name})")]
    NonFiniteGradient { index: usize, name: String },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("non-finite input at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: row {row}: {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("bin specification is frozen")]
    Frozen,

    #[error("bin specification must be frozen for hard assignment")]
    NotFrozen,

    #[error("teacher family `{0}` is not differentiable")]
    NotDifferentiable(String),

    #[error("replay buffer is empty")]
    EmptyReplayBuffer,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("network error: {0}")]
    Network(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Whether the failure came from numerics rather than inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. }
                | Error::NonFiniteLoss(_)
                | Error::ShapeMismatch { .. }
                | Error::NonScalarLoss(_)
                | Error::EmptyTape
        )
    }

    /// Whether the failure came from reading or validating input files.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Csv { .. }
                | Error::Data(_)
                | Error::Format(_)
                | Error::Io { .. }
                | Error::Network(_)
                | Error::NonFiniteInput { .. }
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Format(e.to_string())
    }
}
