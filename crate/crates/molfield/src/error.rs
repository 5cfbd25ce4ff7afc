//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown element symbol {symbol:?} at line {line}")]
    UnknownElement { line: usize, symbol: String },

    #[error("invalid molecule: {0}")]
    InvalidMolecule(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("empty result: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable one-word category for machine-parsable CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse { .. } | Error::UnknownElement { .. } => "parse",
            Error::InvalidMolecule(_) => "molecule",
            Error::ShapeMismatch(_) => "shape",
            Error::NonFinite(_) | Error::Divergence(_) => "numeric",
            Error::Config(_) => "config",
            Error::Corrupt(_) | Error::Version { .. } => "corrupt",
            Error::Empty(_) => "empty",
            Error::Io(_) => "io",
        }
    }
}
