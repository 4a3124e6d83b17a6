//! Experiment runner for the `fedvc` simulator: configuration files, single
//! runs with their on-disk artifacts, and one-axis sweeps.

pub mod config;
pub mod experiment;
pub mod sweep;

pub use config::{ConfigError, ExperimentConfig};
pub use experiment::{run_experiment, ExperimentOutcome, ExperimentSummary, StrategySummary};
pub use sweep::{run_sweep, Isolation, SweepAxis, SweepSpec, SweepTable};
