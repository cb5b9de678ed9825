use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{file}:{line}: malformed row: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },

    #[error("{file}:{line}: duplicate record for user {user_id} on {date} minute {minute}")]
    DuplicateRecord {
        file: String,
        line: u64,
        user_id: String,
        date: String,
        minute: u16,
    },

    #[error("{file}:{line}: schema violation: {message}")]
    Schema {
        file: String,
        line: u64,
        message: String,
    },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("series too short: length {len}, need more than {need}")]
    SeriesTooShort { len: usize, need: usize },

    #[error("split error: {0}")]
    Split(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("window size mismatch: model expects w = {expected}, input has {got} rows")]
    WindowMismatch { expected: usize, got: usize },

    #[error("missing modality: {0}")]
    MissingModality(String),

    #[error("checkpoint integrity check failed: {0}")]
    CheckpointIntegrity(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 data/schema, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Split(_) => 1,
            Error::Shape { .. }
            | Error::State(_)
            | Error::NonFinite { .. }
            | Error::UndefinedMetric(_) => 3,
            _ => 2,
        }
    }
}
