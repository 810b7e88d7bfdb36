use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A metric or statistic has no defined value for the given input
    /// (constant series, zero mean, ...).
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("data error at line {line}: {message}")]
    DataRow { line: u64, message: String },

    #[error("data validation failed: {0}")]
    Validation(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
