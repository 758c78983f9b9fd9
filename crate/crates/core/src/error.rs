use thiserror::Error;

use crate::trainer::TrainAbort;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: value {value} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("{op} produced a non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward called on a tensor that is not connected to any gradient path")]
    Detached,

    #[error("invalid knot vector: {0}")]
    Knots(String),

    #[error("sinkhorn scaling became non-finite (cost min {min}, max {max}, median {median}, eps {eps})")]
    Sinkhorn {
        min: f64,
        max: f64,
        median: f64,
        eps: f64,
    },

    #[error("treatment id {id} out of range 1..={k}")]
    Treatment { id: usize, k: usize },

    #[error("csv row {row}, column `{column}`: {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema: {0}")]
    Schema(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training aborted at epoch {}: {} became non-finite", .0.epoch, .0.term)]
    TrainingAborted(Box<TrainAbort>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
