//! Config-driven experiment runner: simulate multi-energy fan-beam data,
//! reconstruct channel images, decompose them into material maps and
//! score the pipelines, writing every artifact to a run directory.

pub mod args;
pub mod config;
pub mod error;
pub mod io;
pub mod run;

pub use config::{validate_config, ExperimentConfig, Pipeline, ReferenceMode};
pub use error::{CliError, ConfigErrors, Result};
pub use run::{run_experiment, RunManifest, RunOutput};
