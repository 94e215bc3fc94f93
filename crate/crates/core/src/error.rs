use thiserror::Error;

/// Errors produced by model construction, solvers and IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error(
        "exact enumeration needs {scenarios} scenarios, above the cap {cap}; \
         use the Monte Carlo backend instead"
    )]
    EnumerationCapExceeded { scenarios: u128, cap: usize },

    #[error(
        "no root bracket in [{lo}, {hi}] ({detail}); the loss/data pair looks infeasible"
    )]
    BracketNotFound { lo: f64, hi: f64, detail: String },

    #[error("implicit driver step did not converge after {iters} iterations (last delta {delta:.3e})")]
    ImplicitStepDiverged { iters: usize, delta: f64 },

    #[error(
        "fixed-point iteration did not converge after {iters} iterations \
         (deltas {history:?}); assumptions may be violated or the interval length too large"
    )]
    PicardDiverged { iters: usize, history: Vec<f64> },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("validation failed: {0}")]
    ValidationFailed(String),

    #[error("experiment aborted: {0}")]
    ExperimentAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
