//! Experiment orchestration: configs and presets, the staged pipeline with
//! its manifest, and run summaries.

pub mod config;
pub mod experiment;
pub mod report;

pub use config::{EvalConfig, ExperimentConfig, LatencyConfig, PartitionConfig, ThresholdChoice};
pub use experiment::{run_experiment, RunManifest, Stages};
pub use report::{emit_report, Summary};
