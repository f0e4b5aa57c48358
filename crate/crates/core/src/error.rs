use thiserror::Error;

use crate::bellman::IterationTrace;
use crate::mdp::AuditReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("coefficient `{coefficient}` is not finite at {point:?}")]
    NonFiniteCoefficient { coefficient: String, point: Vec<f64> },

    #[error("{} declared bound(s) violated, first on `{}`", .report.violations.len(), .report.violations.first().map(|v| v.coefficient.as_str()).unwrap_or("?"))]
    BoundViolation { report: Box<AuditReport> },

    #[error("non-finite value at node {node}")]
    NonFiniteValue { node: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("grid functions live on different domains")]
    DomainMismatch,

    #[error("block was trained on grid {expected}, got grid {actual}")]
    GridMismatch { expected: String, actual: String },

    #[error("simulated state became non-finite at substep {substep}")]
    NonFiniteState { substep: usize },

    #[error("value iteration did not converge within {} iterations", .trace.step_distances.len())]
    NotConverged { trace: Box<IterationTrace> },

    #[error("regularity check failed for iterate {index}: {what} = {measured} exceeds {limit}")]
    RegularityViolation {
        index: usize,
        what: &'static str,
        measured: f64,
        limit: f64,
    },

    #[error("rejection budget of {budget} exhausted while sampling within caps")]
    RejectionBudgetExceeded { budget: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("no block available for layer {layer}")]
    BlockMissing { layer: usize },

    #[error("reference trace holds {available} iterates, {required} required")]
    ReferenceTooShort { available: usize, required: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed file: {0}")]
    Format(String),
}
