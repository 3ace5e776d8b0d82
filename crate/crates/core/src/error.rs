use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IflError {
    #[error("{file}:{line}: {msg}")]
    Malformed { file: PathBuf, line: u64, msg: String },

    #[error("no interactions")]
    NoInteractions,

    #[error("unknown split tag `{0}`")]
    UnknownSplit(String),

    #[error("interaction references unseen {side} id `{id}` ({file}:{line})")]
    UnknownEntity {
        side: &'static str,
        id: String,
        file: PathBuf,
        line: u64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate bias configuration: split `{0}` has no kept positives")]
    DegenerateBias(&'static str),

    #[error("fewer points than clusters ({points} < {clusters})")]
    TooFewPoints { points: usize, clusters: usize },

    #[error("batch too small for in-batch negatives (size {0})")]
    BatchTooSmall(usize),

    #[error("unstable variance-loss evaluation at {side} field {field}")]
    UnstableVarianceLoss { side: &'static str, field: usize },

    #[error("non-finite {term} loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        term: &'static str,
    },

    #[error("insufficient training positives: {have} < batch size {need}")]
    InsufficientPositives { have: usize, need: usize },

    #[error("split `{0}` has no evaluable users")]
    NoEvaluableUsers(&'static str),

    #[error("table {} has no data rows", .0.display())]
    EmptyTable(PathBuf),

    #[error("empty relevance set")]
    EmptyRelevant,

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl IflError {
    /// Process exit code: 1 for usage and configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            IflError::Config(_) | IflError::EmptyTable(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = IflError> = std::result::Result<T, E>;
