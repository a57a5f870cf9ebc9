use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("attribute subspace is degenerate: all prototype differences vanish")]
    DegenerateSubspace,

    #[error("unknown reference group `{0}`")]
    UnknownReference(String),

    #[error("spherical mean collapsed (sum norm {norm:e}){}", group_suffix(.group))]
    AntipodalCollapse { group: Option<String>, norm: f64 },

    #[error("duplicate group `{0}`")]
    DuplicateGroup(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("input vector is not unit norm (norm {norm})")]
    NonUnitInput { norm: f64 },

    #[error("empty cell: no positive samples for class `{class}` in group `{group}`")]
    EmptyCell { class: String, group: String },

    #[error("group `{0}` is absent from the candidate set")]
    GroupAbsentFromCandidates(String),

    #[error("M = {m} exceeds the {available} ranked candidates")]
    MTooLarge { m: usize, available: usize },

    #[error("prompt `{0}` has no generated images")]
    EmptyGeneration(String),

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("no retrieval candidates")]
    EmptyCandidates,

    #[error("dimension {d} too small for {needed} planted directions")]
    DimensionTooSmall { d: usize, needed: usize },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("record `{0}` has a zero vector")]
    ZeroVector(String),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn group_suffix(group: &Option<String>) -> String {
    match group {
        Some(g) => format!(" for group `{g}`"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(expected: usize, found: usize) -> Self {
        Error::DimensionMismatch { expected, found }
    }
}
