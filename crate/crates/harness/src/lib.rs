//! Experiment driver: configuration, deterministic CSV output and the
//! trajectory, sweep, scatter, stability and oracle commands.

pub mod analysis;
pub mod config;
pub mod experiments;
pub mod format;
pub mod manifest;

pub use config::{Command, ConfigError, RunConfig, Settings};
pub use experiments::{run, Report, RunError};
