use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected length {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("refusing to materialize a {rows}x{cols} operator ({entries} entries exceeds cap {cap})")]
    MaterializeCap {
        rows: usize,
        cols: usize,
        entries: usize,
        cap: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("preconditioner is singular: {0}")]
    SingularPreconditioner(String),

    #[error("core tensor too large: {entries} entries exceeds budget {budget}; lower p")]
    TensorBudget { entries: usize, budget: usize },

    #[error("point {index} lies outside the interpolation box")]
    OutsideBox { index: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("failed to parse {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user input (configuration, files,
    /// parameters) rather than from a numerical breakdown.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::Io { .. }
                | Error::InvalidParameter(_)
                | Error::Csv(_)
                | Error::OutsideBox { .. }
                | Error::TensorBudget { .. }
                | Error::MaterializeCap { .. }
        )
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
