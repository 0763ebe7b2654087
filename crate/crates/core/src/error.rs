//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("maturity value {0} is not a finite nonnegative number")]
    InvalidMaturity(f64),

    #[error("duplicate maturity {0} in point set")]
    DuplicatePoints(f64),

    #[error("measure atom at {0} lies outside the frame's base points")]
    SupportOutsideBase(f64),

    #[error("clock increment {0} must be strictly positive")]
    NonPositiveClockStep(f64),

    #[error("tree would need {needed} nodes, above the cap of {cap}")]
    NodeCapExceeded { needed: u128, cap: u64 },

    #[error("beta = {0} is outside the admissible range (beta > 3 required)")]
    BetaOutOfRange(f64),

    #[error(
        "implicit scalar solve diverged at step {step} (eta*dA = {eta_da}); use a finer clock"
    )]
    ImplicitSolveDiverged { step: usize, eta_da: f64 },

    #[error("driver returned a non-finite value at step {step}")]
    NonFiniteDriver { step: usize },

    #[error("kernel rank {rank} exceeds the tree's factor count {factors}")]
    RankExceedsFactors { rank: usize, factors: usize },

    #[error("claim is not attainable: residual martingale norm^2 = {residual}")]
    NotAttainable { residual: f64 },

    #[error("config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("invariant check failed: {0}")]
    InvariantFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}
