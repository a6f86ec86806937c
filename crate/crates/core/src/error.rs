use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the search pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config is missing dimension `{0}`")]
    MissingDimension(String),

    #[error("unknown choice `{choice}` for dimension `{dimension}`")]
    UnknownChoice { dimension: String, choice: String },

    #[error("invalid design space: {0}")]
    InvalidSpace(String),

    #[error("task `{0}` has no trials")]
    EmptyTask(String),

    #[error("invalid trial record: {0}")]
    InvalidTrial(String),

    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("degenerate fisher information (m1 = {m1:e})")]
    DegenerateFim { m1: f64 },

    #[error("projection output has zero norm")]
    ZeroVector,

    #[error("need at least {needed} tasks, got {got}")]
    InsufficientTasks { needed: usize, got: usize },

    #[error("rank correlation undefined: a vector is constant")]
    AllTied,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid search budget: {0}")]
    InvalidBudget(String),

    #[error("training loss diverged")]
    DivergedLoss,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
