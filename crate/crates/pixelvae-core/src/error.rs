//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

/// Everything that can go wrong below the I/O layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor shapes disagree with an operation's requirements.
    InvalidShape(String),
    /// A caller violated an operation's contract (bad argument values).
    Contract(String),
    /// A computation produced non-finite or otherwise unusable numbers.
    Numeric(String),
    /// Malformed serialized data (IDX files, checkpoints, config text).
    Format(String),
    /// An inconsistent model or training configuration.
    Config(String),
    /// Training failed (non-finite loss or gradient).
    Training(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidShape(m) => write!(f, "invalid shape: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Training(m) => write!(f, "training error: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
