use thiserror::Error;

/// Errors raised by parameter validation and inference routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("encoding mismatch: expected {expected}, found {found}")]
    EncodingMismatch { expected: String, found: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("enumeration budget exceeded: {0}")]
    Budget(String),
    #[error("infeasible constraint: {0}")]
    Infeasible(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
