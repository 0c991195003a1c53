use thiserror::Error;

/// Errors produced by the numerical layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error(
        "rank deficient: pivot {pivot:.3e} at index {index} is below the threshold {threshold:.3e}"
    )]
    RankDeficient {
        index: usize,
        pivot: f64,
        threshold: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("memory budget exceeded: {requested} stored values requested, budget is {budget}")]
    MemoryBudget { requested: usize, budget: usize },

    #[error("regression singular at step {step}")]
    RegressionSingular { step: usize },

    #[error("divergence at step {step}: max |value| = {value:.3e} exceeds {bound:.3e}")]
    Divergence { step: usize, value: f64, bound: f64 },

    #[error("{assumption} at t = {time}: {detail}")]
    Assumption {
        assumption: &'static str,
        time: f64,
        detail: String,
    },

    #[error("no convergence after {} iterations (last residual {:.3e})", .residuals.len(), .residuals.last().copied().unwrap_or(f64::NAN))]
    NoConvergence { residuals: Vec<f64> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
