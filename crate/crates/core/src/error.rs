use std::io;

use thiserror::Error;

use crate::pool_io::FormatError;

/// Errors raised by the acquisition engine.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),
    /// A configuration value is missing, unknown or out of range.
    #[error("config error: {0}")]
    Config(String),
    /// An internal invariant was broken (e.g. a patch labelled twice).
    #[error("invariant violation: {0}")]
    Invariant(String),
    /// Training produced a non-finite loss.
    #[error("non-finite loss during training: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
