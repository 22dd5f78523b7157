//! Dataset ingestion, experiment orchestration and report emission.

pub mod config;
pub mod data;
pub mod experiment;

pub use config::ExperimentConfig;
pub use experiment::{render_report, run_experiment, ExperimentSummary};
