//! Config-driven experiment runner on top of `tdlab-core`.
//!
//! A run validates a JSON config, executes the preset on a thread pool
//! (one task per seed), then writes CSV artifacts, SVG plots and a
//! `manifest.json` into a directory named after the config hash.

pub mod config;
pub mod error;
pub mod experiments;
pub mod manifest;
pub mod output;
pub mod plot;
pub mod schema;

pub use config::{Experiment, ExperimentConfig};
pub use error::{LabError, Result};
pub use manifest::{run, RunManifest, RunOptions, RunSummary};
