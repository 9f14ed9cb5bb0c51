//! Error type shared across the crate.
//!
//! Errors are split into two broad classes so the CLI can map them onto exit
//! codes: [`Error::is_validation`] covers bad inputs (malformed files, shape
//! mismatches, contradictory configuration), everything else is a runtime
//! failure (I/O, numerical breakdown).

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Configuration is self-contradictory or incomplete for the requested run.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A linear system was too ill-conditioned to solve reliably.
    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),

    /// A non-finite value appeared where the numeric contract forbids it.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Angular correlation is undefined because one input has no energy
    /// outside the constant term.
    #[error("angular correlation undefined: {0}")]
    UndefinedCorrelation(String),

    /// A structured file failed to parse or failed its internal checks.
    #[error("malformed file {path}: {detail}")]
    MalformedFile { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::InvalidConfig(_)
                | Error::MalformedFile { .. }
                | Error::UndefinedCorrelation(_)
        )
    }
}
