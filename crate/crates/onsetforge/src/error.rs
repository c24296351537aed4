use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the transcription toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violated an operation's contract.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A file did not match the expected on-disk format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// An audio file's sample rate differs from the configured rate; the
    /// toolkit never resamples.
    #[error("unsupported sample rate: {got} Hz (need {want} Hz; resampling is not supported)")]
    UnsupportedRate { got: u32, want: f64 },

    /// A numeric computation left the representable range (NaN/∞).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(reason: impl Into<String>) -> Self {
        Error::InvalidInput(reason.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
