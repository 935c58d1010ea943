//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// `Config` and `Contract` are validation-class failures (bad inputs,
/// violated preconditions); the rest are runtime failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value. Carries the offending field path.
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint serialization/deserialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    /// True for errors that indicate bad user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Contract(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
