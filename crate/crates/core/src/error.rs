use std::io;

use thiserror::Error;

/// Errors surfaced by the engine, the index and the trace tooling.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or shape mismatch supplied by the caller.
    #[error("configuration error: {0}")]
    Config(String),

    /// Internal consistency violation. Indicates an engine bug; runs abort.
    #[error("integrity fault: {0}")]
    Integrity(String),

    /// Malformed trace or config bytes.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Short machine-readable classification, used by the CLI error object.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Integrity(_) => "integrity",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
