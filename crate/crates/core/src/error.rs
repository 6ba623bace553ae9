use thiserror::Error;

use crate::dataset::Group;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("group {0} has no examples")]
    EmptyGroup(Group),

    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("stratum {stratum} has {size} examples, fewer than the {k} folds requested")]
    StratumTooSmall {
        stratum: String,
        size: usize,
        k: usize,
    },

    #[error("no examples in cell label={label}, group={group}")]
    EmptyCell { label: u8, group: Group },

    #[error("massaging needs {needed} {side} candidates but only {available} exist")]
    InsufficientCandidates {
        side: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("massaging plan is stale at example {index}: {reason}")]
    StalePlan { index: usize, reason: &'static str },

    #[error("degenerate signal: {0}")]
    Degenerate(String),

    #[error("csv row {row}, column {column}: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("seed {seed}, fold {fold}, mitigation {mitigation}: {source}")]
    Experiment {
        seed: u64,
        fold: usize,
        mitigation: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
