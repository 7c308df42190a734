//! Experiment runner: fixture synthesis, geometry restoration, multi-view
//! refinement with ablations, and run summaries.

pub mod commands;
pub mod config;
pub mod error;
mod plot;

pub use commands::{cmd_eval, cmd_refine, cmd_restore, cmd_synth, read_metrics, run_dir, Summary, Variant};
pub use config::{ExperimentConfig, Overrides};
pub use error::CliError;
