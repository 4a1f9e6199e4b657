use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the navigation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("map format error: {0}")]
    Format(String),

    #[error("degenerate map: {0}")]
    DegenerateMap(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("goal unreachable from {from:?}")]
    Unreachable { from: (usize, usize) },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("non-finite loss at update {update}: {detail}")]
    NonFinite { update: usize, detail: String },

    #[error("invalid value for `{key}`: {reason}")]
    Validation { key: String, reason: String },

    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
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
}
