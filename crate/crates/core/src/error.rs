use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },

    #[error("validation failed for example `{id}`: {message}")]
    Validation { id: String, message: String },

    #[error("duplicate example id `{0}`")]
    DuplicateId(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("sequence length {len} exceeds limit {max}")]
    Length { len: usize, max: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stale negative cache: {0}")]
    StaleCache(String),

    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Diverged {
        epoch: usize,
        step: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
