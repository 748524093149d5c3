use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config [{module}.{field}]: {message}")]
    InvalidConfig {
        module: &'static str,
        field: &'static str,
        message: String,
    },

    #[error("numerical error at {location}: {message}")]
    Numerical { location: String, message: String },

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(module: &'static str, field: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            module,
            field,
            message: message.into(),
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
