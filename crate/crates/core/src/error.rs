use thiserror::Error;

use crate::dynamics::Trajectory;

/// Errors raised by the model, reward, accuracy and dynamics engines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected} factors, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("exact enumeration refused: n = {n} exceeds the limit of {limit} factors")]
    SizeLimit { n: usize, limit: usize },

    #[error("model has a factor covariance; use the correlated world sampler")]
    CorrelatedModel,

    #[error("unsupported covariance: {0}")]
    UnsupportedCovariance(String),

    #[error("degenerate attention at factor {index}: vote variance is zero, use the exact or Monte Carlo path")]
    DegenerateAttention { index: usize },

    #[error("sparse accuracy fallback refused: attention is spread over {heavy} factors")]
    SparseFallbackRefused { heavy: usize },

    /// The trajectory ends at the last accepted state.
    #[error("step size underflow at t = {t:e} (dt = {dt:e})")]
    StepUnderflow {
        t: f64,
        dt: f64,
        trajectory: Box<Trajectory>,
    },

    #[error("step budget of {steps} exhausted at t = {t:e}")]
    StepBudget {
        t: f64,
        steps: usize,
        trajectory: Box<Trajectory>,
    },
}

impl Error {
    /// The partial trajectory of an integration that stopped early.
    pub fn into_partial(self) -> Option<Trajectory> {
        match self {
            Error::StepUnderflow { trajectory, .. } | Error::StepBudget { trajectory, .. } => Some(*trajectory),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
