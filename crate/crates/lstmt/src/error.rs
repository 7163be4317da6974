//! Error types shared across the crate.

use std::fmt;

/// Crate-wide error kind.
#[derive(Debug)]
pub enum Error {
    /// Shape or dimension mismatch; the message names the offending shapes.
    Dim(String),
    /// A NaN or Inf was produced; the message names the operation.
    Numeric(String),
    /// Token id outside the vocabulary.
    Vocab(String),
    /// An operation was called outside its contract (empty corpus, non-scalar loss, ...).
    Contract(String),
    /// Bad configuration (incompatible streams, vocabulary mismatch, unknown keys, ...).
    Config(String),
    /// Malformed or inconsistent data file; message carries the location.
    Data(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Numeric(m) => write!(f, "numerical failure: {m}"),
            Error::Vocab(m) => write!(f, "vocabulary error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
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

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
