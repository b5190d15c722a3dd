use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the emulator.
///
/// The variants are grouped so that a caller (the CLI in particular) can map
/// them onto a small set of outcomes: bad input, numerical breakdown, or I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("singular correlation matrix at level {level:?} (size {size}): factorization failed with jitter up to {jitter:e}")]
    Singular {
        level: Option<usize>,
        size: usize,
        jitter: f64,
    },

    #[error("degrees of freedom error: {0}")]
    DegreesOfFreedom(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("model schema error: {0}")]
    Schema(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for errors caused by malformed or inconsistent input.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Domain(_)
                | Error::Validation(_)
                | Error::DegreesOfFreedom(_)
                | Error::Parse { .. }
                | Error::Schema(_)
        )
    }

    /// True for failures of the numerical machinery on valid input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. } | Error::Numerical(_) | Error::Optimization(_)
        )
    }

    pub(crate) fn with_level(self, level: usize) -> Self {
        match self {
            Error::Singular { size, jitter, .. } => Error::Singular {
                level: Some(level),
                size,
                jitter,
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
