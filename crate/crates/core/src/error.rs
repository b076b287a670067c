use thiserror::Error;

/// Failures reported by the adaptive integrator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("step size underflow at t = {t}: required step {h:e} is below h_min")]
    StepUnderflow { t: f64, h: f64 },
    #[error("exceeded {max_steps} steps before reaching t = {t}")]
    MaxStepsExceeded { t: f64, max_steps: usize },
    #[error("right-hand side produced a non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("invalid query times: {0}")]
    InvalidQuery(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("parameter {index} is not strictly positive ({value})")]
    NonPositiveParam { index: usize, value: f64 },
    #[error("model evaluation failed: {0}")]
    EvalFailed(SolverError),
    #[error("{rejected} of {draws} parameter draws failed to integrate; check the prior")]
    RejectionOverflow { rejected: usize, draws: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("deep set input is empty")]
    EmptySet,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("invalid weight file: {0}")]
    WeightFormat(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
