use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// `is_numeric` separates numerical failures (non-convergence, non-finite
/// values) from contract violations so callers can map them to distinct
/// exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("pruning factor search exhausted after zeroing {achieved} of {target} entries")]
    SearchOverflow { achieved: usize, target: usize },
    #[error("lasso did not converge in {sweeps} sweeps (last max change {max_change:e})")]
    IterationLimit { sweeps: usize, max_change: f64 },
}

impl Error {
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::SearchOverflow { .. } | Error::IterationLimit { .. }
        )
    }

    pub(crate) fn io(path: &std::path::Path, source: io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
