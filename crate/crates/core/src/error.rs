use std::path::PathBuf;

/// Errors raised anywhere in the detection and adaptation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("corrupt annotation record at entry {index}: {message}")]
    CorruptAnnotation { index: usize, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("memory file {path}: {message}")]
    MemoryFile { path: PathBuf, message: String },

    #[error("parameter sets differ: {0}")]
    ParamMismatch(String),

    #[error("non-finite loss at epoch {epoch} step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
