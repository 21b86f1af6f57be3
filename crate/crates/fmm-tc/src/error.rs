//! Crate-wide error type.

use std::fmt;
use std::io;

#[derive(Debug)]
pub enum Error {
    /// An operation received tensors whose shapes do not fit it.
    ShapeMismatch { op: &'static str, detail: String },
    /// Graph construction or backward-pass contract violation.
    Graph(String),
    /// Invalid argument outside of shape issues (bad ratio, bad label, ...).
    InvalidArgument(String),
    /// Cohort generation / dataset contract violation.
    Data(String),
    /// On-disk format violation (bad magic, checksum, missing entry, ...).
    Format(String),
    /// Run configuration violation, named per field.
    Config(String),
    /// Training diverged (non-finite loss).
    Divergence(String),
    Io(io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Error {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "shape mismatch in `{op}`: {detail}"),
            Error::Graph(msg) => write!(f, "graph error: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Divergence(msg) => write!(f, "training diverged: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
