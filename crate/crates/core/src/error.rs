use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("task {task_id}: expected feature dimension {expected}, found {found}")]
    DimensionMismatch {
        task_id: usize,
        expected: usize,
        found: usize,
    },

    #[error("task {task_id} has no samples")]
    EmptyTask { task_id: usize },

    #[error("task {task_id}: non-finite value in sample {sample}")]
    NonFiniteValue { task_id: usize, sample: usize },

    #[error("task weights sum to {sum}, expected 1")]
    WeightSum { sum: f64 },

    #[error("task {task_id}: weight {weight} outside (0, 1]")]
    InvalidWeight { task_id: usize, weight: f64 },

    #[error("task {task_id}: {count} labels for {samples} samples")]
    LabelCount {
        task_id: usize,
        count: usize,
        samples: usize,
    },

    #[error("collection has no tasks")]
    EmptyCollection,

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("tape does not match the network: {0}")]
    StaleTape(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("unknown task id {task_id} (model has {num_tasks} tasks)")]
    UnknownTask { task_id: usize, num_tasks: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing labels on task {task_id}")]
    MissingLabels { task_id: usize },

    #[error("label {label} out of range for arity {arity}")]
    LabelOutOfRange { label: u32, arity: usize },

    #[error("zero-norm embedding at index {0}")]
    ZeroNorm(usize),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("support violation: p[{index}] = 0 where q[{index}] > 0")]
    SupportViolation { index: usize },

    #[error("simplex grid with {points} points is too large (limit {limit})")]
    InfeasibleGrid { points: u128, limit: u128 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("events reference unknown users: {0:?}")]
    DanglingUsers(Vec<String>),

    #[error("item {0} has a single label category, no anomalous class")]
    NoAnomalousClass(String),

    #[error("no tasks survive filtering")]
    NoSurvivors,

    #[error("oracle failed: {0}")]
    Oracle(String),

    #[error("i/o error on {path}: {source}")]
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
