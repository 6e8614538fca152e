use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("optimizer: parameter `{name}` has no gradient")]
    MissingGrad { name: String },

    #[error("optimizer: non-finite gradient for parameter `{name}`")]
    NonFiniteGrad { name: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Ingest { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("training aborted at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("teacher: {0}")]
    Teacher(String),

    #[error("pruning schedule exhausted: no unmasked prunable weights remain")]
    NothingToPrune,
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numerical blow-ups rather than bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteGrad { .. } | Error::Training { .. }
        )
    }
}
