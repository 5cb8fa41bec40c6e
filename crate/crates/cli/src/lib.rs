//! Experiment driver behind the `fairmesh` binary.

pub mod config;
pub mod experiment;
pub mod presets;

pub use config::{ConfigError, ExperimentConfig, ExperimentKind};
pub use experiment::{
    analyze_report, compare_schedulers, run_experiment, Outcome, Report, RunError,
};
