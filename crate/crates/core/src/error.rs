use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SscError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing dependency: {0}")]
    MissingDependency(String),
}

impl SscError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SscError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        SscError::Invalid(msg.into())
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        SscError::Format {
            what,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = SscError> = std::result::Result<T, E>;
