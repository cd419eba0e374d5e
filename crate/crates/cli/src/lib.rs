//! Staged, resumable pipeline driver behind the `delusim` binary.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;
pub mod svg;
pub mod synth;

pub use config::RunConfig;
pub use error::CliError;
pub use stages::{run_pipeline, run_stage, Stage, StageOutcome};
