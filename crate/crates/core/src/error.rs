use std::path::PathBuf;

use thiserror::Error;

/// Parse failure with the byte offset where it was detected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at byte {position}: {message}")]
pub struct SyntaxError {
    pub position: usize,
    pub message: String,
}

impl SyntaxError {
    pub(crate) fn new(position: usize, message: impl Into<String>) -> Self {
        Self { position, message: message.into() }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid k: {0} (must be at least 1)")]
    InvalidK(usize),

    #[error("prompt budget of {budget} tokens cannot hold the test block ({needed} tokens)")]
    BudgetTooSmall { budget: usize, needed: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus error: {message}")]
    Corpus { message: String, failures: Vec<String> },

    #[error("index version mismatch: expected {expected}, found {found}")]
    IndexVersion { expected: String, found: String },

    #[error("fixture generation failed: {0}")]
    Generation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Format { what: what.into(), message: message.to_string() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
