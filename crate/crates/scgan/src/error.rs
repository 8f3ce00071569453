//! Error taxonomy shared by the library and the CLI.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("argument error: {0}")]
    Argument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("decode error for {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("parse error at {path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric error: component '{component}' is {value}")]
    Numeric { component: String, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("resource error: {0}")]
    Resource(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
