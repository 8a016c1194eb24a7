use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
///
/// Variants are grouped so that a driver can map them onto stable exit
/// codes: [`Error::Io`] is an I/O failure, [`Error::Diverged`] is a training
/// divergence, and everything else is a validation failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("duplicate token {token:?} on lines {first} and {second}")]
    DuplicateToken {
        token: String,
        first: usize,
        second: usize,
    },

    #[error("vocabulary is missing reserved token {0}")]
    MissingSpecial(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("incompatible {what}: expected {expected}, found {found}")]
    Incompatible {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },

    #[error("invalid counts: correct {correct} > total {total}")]
    InvalidCounts { correct: u64, total: u64 },

    #[error("corrupted statistics for token {id}: correct {correct} > total {total}")]
    CorruptedStats { id: u32, correct: u64, total: u64 },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Diverged { .. })
    }
}
