//! Evolutionary model of collective prediction.
//!
//! A population splits its attention `ρ` over `n` binary factors whose
//! `β`-weighted sum decides a binary outcome. Agents are paid for correct
//! votes under one of three schemes and imitate better-paid peers, which in
//! the mean-field limit is the replicator equation. The crate computes
//! expected rewards, collective accuracy, replicator trajectories, stability
//! diagnostics and Monte Carlo cross-checks.

pub mod accuracy;
pub mod dynamics;
pub mod error;
pub mod mc;
pub mod model;
pub mod normal;
pub mod quadrature;
pub mod rewards;
pub mod rng;
pub mod stability;

pub use accuracy::{collective_accuracy, diversity};
pub use dynamics::{IntegratorConfig, Trajectory};
pub use error::{Error, Result};
pub use mc::McEstimate;
pub use model::{
    collective_vote, Attention, CorrelationBlock, Covariance, FactorModel, InitKind, RewardSpec, Scheme, VoteSummary,
    WorldSample, DEFAULT_EPSILON, DEFAULT_EXACT_LIMIT,
};
pub use quadrature::QuadratureConfig;
pub use rewards::{EvalMode, ExpectedRewards, RewardConfig, RewardMode};
pub use stability::StabilityReport;
