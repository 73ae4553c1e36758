use thiserror::Error;

/// Errors produced anywhere in the fitting and forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A natural-scale parameter lies outside its support.
    #[error("domain error in {block}[{index}]: {message}")]
    Domain {
        block: &'static str,
        index: usize,
        message: String,
    },
    /// A density or gradient evaluation produced a non-finite value.
    #[error("non-finite value in {block}")]
    Evaluation { block: String },
    /// A factorisation failed (matrix not positive definite).
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Shapes or values supplied by the caller are inconsistent.
    #[error("input error: {0}")]
    Input(String),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("snapshot error: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
