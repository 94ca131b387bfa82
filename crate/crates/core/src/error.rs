use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("degenerate batch: {0} elements per channel, need at least 2")]
    DegenerateBatch(usize),

    #[error("empty spatial extent")]
    EmptySpatial,

    #[error("invalid class pair ({0}, {0}): core classes are addressed directly")]
    InvalidPair(usize),

    #[error("{what} {value} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("running statistics are not initialized; train at least one batch before evaluating")]
    UninitializedStats,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u64, expected: u64 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset not found at {0}; generate it first with `mdknet gen`")]
    MissingDataset(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl ToString, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.to_string(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failure during a run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Schedule(_)
                | Error::InvalidArgument(_)
                | Error::MissingDataset(_)
                | Error::CheckpointVersion { .. }
                | Error::Json { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
