use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("label {value} out of range [0, {num_classes}) at {position}")]
    Label {
        value: u8,
        num_classes: usize,
        position: String,
    },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("corrupt file {path}: {message}")]
    Corruption { path: PathBuf, message: String },

    #[error("non-finite gradient in `{param}` at step {step}")]
    NonFinite { param: String, step: u64 },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Topology(_) => 1,
            Error::Format { .. } | Error::Corruption { .. } | Error::Io { .. } | Error::Json(_) => 2,
            Error::Label { .. } => 2,
            Error::NonFinite { .. } | Error::Divergence(_) => 3,
            Error::Dimension(_) | Error::Contract(_) | Error::DegenerateBatch(_) => 3,
        }
    }
}
