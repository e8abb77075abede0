use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: expected 3 tab-separated fields, found {found}")]
    Parse {
        path: PathBuf,
        line: usize,
        found: usize,
    },
    #[error("{path}:{line}: unknown {kind} `{token}`")]
    UnknownToken {
        path: PathBuf,
        line: usize,
        kind: &'static str,
        token: String,
    },
    #[error("{path}:{line}: name `{token}` contains the reserved inverse marker")]
    ReservedName {
        path: PathBuf,
        line: usize,
        token: String,
    },
    #[error("no triple files given")]
    NoInput,
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint magic mismatch")]
    MagicMismatch,
    #[error("unsupported checkpoint format version {0}")]
    VersionMismatch(String),
    #[error("checkpoint truncated inside the header")]
    Truncated,
    #[error("checkpoint payload has {found} bytes, header declares {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("bad checkpoint header: {0}")]
    BadHeader(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
