use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("adaptation precondition failed: pseudo-{0} set is empty")]
    EmptyPseudoSet(&'static str),

    #[error("non-finite loss at adaptation step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite loss while probing coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },

    #[error("metric undefined: class {0} has no ground-truth instances")]
    UndefinedMetric(usize),

    #[error("csv schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("csv parse error in {path} at row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("inconsistent checkpoint shapes: {0}")]
    CheckpointShape(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
