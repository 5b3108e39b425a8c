use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// The CLI maps these onto process exit codes: [`Error::Usage`] is a usage
/// error, [`Error::NonFinite`] a numeric failure, everything else a data error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("{op}: incompatible shapes {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("{0}")]
    Invalid(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
