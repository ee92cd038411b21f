//! Error type shared by every module of the crate.

use crate::checkpoint::CompatReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed checkpoint or data file.
    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite tensor: `{0}` contains NaN or Inf")]
    NonFinite(String),

    #[error("empty tensor map")]
    EmptyMap,

    #[error("incompatible tensor maps:\n{0}")]
    Incompatible(CompatReport),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Arithmetic produced a non-finite value (overflow, divergence).
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
