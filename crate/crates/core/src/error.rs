use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record {record}: {reason}")]
    Malformed { record: usize, reason: String },

    #[error("bad header: {0}")]
    Header(String),

    #[error("dimension mismatch at record {record}: expected {expected}, got {got}")]
    DimensionMismatch {
        record: usize,
        expected: usize,
        got: usize,
    },

    #[error("label out of range at record {record}: {label} >= {num_classes}")]
    LabelOutOfRange {
        record: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("duplicate sample id {id} at record {record}")]
    DuplicateId { record: usize, id: u64 },

    #[error("row count mismatch: scores have {scores} rows, dataset has {dataset} samples")]
    RowCount { scores: usize, dataset: usize },

    #[error("sample id mismatch at row {row}: expected {expected}, got {got}")]
    IdMismatch { row: usize, expected: u64, got: u64 },

    #[error("row {row} sums to {sum}, outside tolerance {tolerance}")]
    RowSum { row: usize, sum: f64, tolerance: f64 },

    #[error("invalid entry {value} at row {row}, column {col}")]
    InvalidEntry { row: usize, col: usize, value: f64 },

    #[error("zero-norm embedding at index {index}")]
    ZeroNorm { index: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("empty selection: no sample passed the criterion")]
    EmptySelection,

    #[error("dataset has no ground-truth labels")]
    MissingGroundTruth,

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at line {line}: {reason}")]
    Config { line: usize, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Index of the offending record or row, when the error carries one.
    pub fn record_index(&self) -> Option<usize> {
        match self {
            Error::Malformed { record, .. }
            | Error::DimensionMismatch { record, .. }
            | Error::LabelOutOfRange { record, .. }
            | Error::DuplicateId { record, .. } => Some(*record),
            Error::IdMismatch { row, .. }
            | Error::RowSum { row, .. }
            | Error::InvalidEntry { row, .. } => Some(*row),
            Error::ZeroNorm { index } => Some(*index),
            Error::Config { line, .. } => Some(*line),
            _ => None,
        }
    }
}
