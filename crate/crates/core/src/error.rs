use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("non-finite value in `{name}`: {detail}")]
    NonFinite { name: String, detail: String },

    #[error("checkpoint does not match the architecture:\n{}", .0.join("\n"))]
    ParamMismatch(Vec<String>),

    #[error("test split accessed while locked for training")]
    SplitAccess,

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    /// True for errors caused by bad user input (config, usage), which the
    /// CLI reports with exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
