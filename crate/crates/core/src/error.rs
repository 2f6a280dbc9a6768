use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent configuration (model shapes, hyperparameters, config files).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid arguments to an operation (labels out of range, budgets larger than a pool, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Data file did not match its declared binary format.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// NaN or infinity showed up in a gradient or parameter vector.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Federation bookkeeping was violated (e.g. aggregating clients with no labelled data).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) => 2,
            Error::Format { .. } => 3,
            Error::Numerical(_) => 4,
            Error::Protocol(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 1,
        }
    }

    pub(crate) fn with_context(self, context: impl AsRef<str>) -> Self {
        match self {
            Error::Numerical(msg) => Error::Numerical(format!("{}: {msg}", context.as_ref())),
            Error::Protocol(msg) => Error::Protocol(format!("{}: {msg}", context.as_ref())),
            other => other,
        }
    }
}
