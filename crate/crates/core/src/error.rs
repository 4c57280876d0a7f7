use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A caller broke an operation's precondition (non-scalar root, id out of
    /// range, zero row where a direction is required, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad data: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("corrupted checkpoint: {0}")]
    Corruption(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error families, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Numerical => "numerical",
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Shape { .. } | Error::Contract(_) => ErrorClass::Config,
            Error::Data(_) | Error::Format(_) | Error::Corruption(_) | Error::Io { .. } => {
                ErrorClass::Data
            }
            Error::Numerical(_) => ErrorClass::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
