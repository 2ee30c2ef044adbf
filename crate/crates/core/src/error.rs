//! Error type shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by tracker components.
#[derive(Debug)]
pub enum Error {
    /// A precondition on an argument was violated.
    Invalid(String),
    /// Shapes, lengths or channel counts do not agree.
    Mismatch(String),
    /// A linear system cannot be solved (zero-energy bin with zero regularizer).
    Singular(String),
    /// A malformed file or unparseable field.
    Format(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::Mismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::Singular(msg) => write!(f, "singular system: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Invalid(format!($($arg)*))
    };
}

macro_rules! mismatch {
    ($($arg:tt)*) => {
        $crate::error::Error::Mismatch(format!($($arg)*))
    };
}

pub(crate) use invalid;
pub(crate) use mismatch;
