use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("zero parsable rows in {0}")]
    NoRows(PathBuf),
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("all sessions were filtered out")]
    AllFiltered,
    #[error("need at least 2 non-empty cycles, found {0}")]
    TooFewCycles(usize),
    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot shrink vocabulary from {from} to {to}")]
    Shrink { from: usize, to: usize },
    #[error("non-finite loss in cycle {cycle}, epoch {epoch}: {detail}")]
    Divergence {
        cycle: usize,
        epoch: usize,
        detail: String,
    },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("invalid config: field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("incomplete run directory {path}: missing {missing}")]
    IncompleteRun { path: PathBuf, missing: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
