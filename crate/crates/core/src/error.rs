use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("degenerate weight at index {index}: {value}")]
    DegenerateWeight { index: usize, value: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("multiplier bracket failed after {doublings} doublings (upper = {upper}, f = {value})")]
    BracketFailure {
        doublings: usize,
        upper: f64,
        value: f64,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("training diverged in round {round} on client {client}: {message}")]
    Divergence {
        round: usize,
        client: usize,
        message: String,
    },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("ingestion error in {path} at byte offset {offset}: {message}")]
    Ingestion {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("oracle scope error: {0}")]
    OracleScope(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
