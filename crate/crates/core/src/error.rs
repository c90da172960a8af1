use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    DimensionMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("k = {k} out of range 1..={len}")]
    KOutOfRange { k: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("SVD did not converge within {cap} sweeps")]
    NoConvergence { cap: usize },

    #[error("context {index} has zero norm")]
    ZeroNormContext { index: usize },

    #[error("cluster id {id} out of range for r = {r}")]
    ClusterOutOfRange { id: usize, r: usize },

    #[error("budget {budget} cannot hold the seed sets; required minimum budget is {required}")]
    InfeasibleBudget { budget: f64, required: f64 },

    #[error("non-finite gradient in batch {batch}")]
    NonFiniteGradient { batch: usize },

    #[error("objective became NaN at half-step {step}")]
    NanLoss { step: usize },

    #[error("label id {id} out of range for vocabulary of {vocab}")]
    LabelOutOfRange { id: usize, vocab: usize },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("planted containment {rate:.4} below {required} after {attempts} attempts; use a smaller noise sigma")]
    Generation {
        rate: f64,
        required: f64,
        attempts: usize,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            op,
            left: left.into(),
            right: right.into(),
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
