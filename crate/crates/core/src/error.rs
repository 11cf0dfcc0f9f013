use std::path::PathBuf;

/// Errors produced anywhere in the fusion pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset {0} is empty")]
    EmptyDataset(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("alignment failed: {0}")]
    Alignment(String),

    #[error("duplicate snapshot key ({example_id}, {model_id}, {mode})")]
    DuplicateSnapshot {
        example_id: String,
        model_id: String,
        mode: String,
    },

    #[error("corrupt snapshot file at byte offset {offset}: {message}")]
    CorruptSnapshot { offset: u64, message: String },

    #[error("missing snapshot for ({example_id}, {model_id}, {mode})")]
    MissingSnapshot {
        example_id: String,
        model_id: String,
        mode: String,
    },

    #[error("epoch {0} is not covered by any phase")]
    EpochOutOfSchedule(usize),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
