use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{source_name}:{line}: malformed record: {reason}")]
    MalformedRecord {
        source_name: String,
        line: usize,
        reason: String,
    },

    #[error("corpus is empty after filtering (min_interactions = {min_interactions})")]
    EmptyCorpus { min_interactions: usize },

    #[error("sequence for user {user_id} has length {len}, need at least 3")]
    SequenceTooShort { user_id: String, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("not enough points for k-means: {points} points, k = {k}")]
    TooFewPoints { points: usize, k: usize },

    #[error("duplicate semantic id {codes:?} without a disambiguator")]
    DuplicateSid { codes: Vec<u32> },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("single-class input: AUC needs at least one positive and one negative")]
    SingleClass,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("vocabulary hash mismatch: checkpoint {expected:016x}, current {actual:016x}")]
    VocabMismatch { expected: u64, actual: u64 },

    #[error("unknown item {0}")]
    UnknownItem(String),

    #[error("teacher service error: {0}")]
    Teacher(String),

    #[error("report schema error: {0}")]
    Schema(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
