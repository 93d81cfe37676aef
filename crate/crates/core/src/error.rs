use thiserror::Error;

use crate::expr::ExprError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("evaluating {what} at {point:?}: {source}")]
    Eval {
        what: String,
        point: Vec<f64>,
        source: ExprError,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),
    #[error("memory cap exceeded: {unknowns} unknowns > cap {cap}")]
    MemoryCap { unknowns: usize, cap: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("linear solve failed: {0}")]
    LinearSolve(String),
    #[error("non-finite state at step {step} (t = {time})")]
    NonFiniteStep { step: usize, time: f64 },
    #[error("not integrable: {0}")]
    NonIntegrable(String),
    #[error("ODE solution overflows near x = {x}")]
    Overflow { x: f64 },
    #[error("singular system: {0}")]
    Singular(String),
}

pub type Result<T> = std::result::Result<T, Error>;
