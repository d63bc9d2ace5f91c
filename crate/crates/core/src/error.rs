use thiserror::Error;

/// Errors raised by the solvers and verifiers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("weights invalid: {0}")]
    Weights(String),

    #[error("tree with {leaves} leaves exceeds the budget cap of {cap}")]
    TreeBudget { leaves: u128, cap: u128 },

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("implicit step {step} did not contract (h * L = {h_lip:.3e})")]
    StepContraction { step: usize, h_lip: f64 },

    #[error("picard iteration at step {step} did not reach tolerance in {iters} iterations")]
    PicardStall { step: usize, iters: usize },

    #[error("regression system at step {step} is rank deficient; use a positive ridge parameter")]
    RankDeficient { step: usize },

    #[error("continuation did not converge: {0}")]
    NoConvergence(String),

    #[error("solution fails re-simulation: residual {residual:.3e} exceeds {limit:.3e}")]
    Consistency { residual: f64, limit: f64 },

    #[error("matrix `{0}` is not symmetric")]
    Asymmetric(String),

    #[error("positive-definiteness condition failed: {0}")]
    NotPositiveDefinite(String),

    #[error("problem outside the supported domain: {0}")]
    Domain(String),

    #[error("conjugate gradient stalled after {iters} iterations (residual {residual:.3e})")]
    Conditioning { iters: usize, residual: f64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
