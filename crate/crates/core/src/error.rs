use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An index or argument outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid distribution parameters (bounds out of order, non-PD covariance, ...).
    #[error("invalid population parameters: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Input(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps an IO error with the path it concerns.
    pub fn file(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::File { path: path.to_path_buf(), source }
    }
}
