use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: {what} is {found}, expected {expected}")]
    Dim {
        what: &'static str,
        found: usize,
        expected: usize,
    },

    #[error("numerical failure at step {step}: {msg}")]
    Numerical { step: usize, msg: String },

    #[error("unsupported format_version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("schema error in sequence {index}, field `{field}`: {msg}")]
    Schema {
        index: usize,
        field: String,
        msg: String,
    },

    #[error("malformed document: {0}")]
    Format(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
