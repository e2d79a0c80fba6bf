//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use specmd_core::{DecompMode, ReconMode};

use crate::config::{validate_config, ExperimentConfig, Pipeline, DESK_CONFIG};
use crate::error::{CliError, ConfigErrors, Result};

#[derive(Debug, Parser)]
#[command(name = "specmd", version, about = "Spectral CT reconstruction and material decomposition experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rasterise the phantom and write clean and noisy sinograms.
    Simulate(Common),
    /// Reconstruct channel images with SART or TVM.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "SART")]
        mode: ReconMode,
        /// Sinogram tensor to reconstruct instead of simulating one.
        #[arg(long)]
        sinogram: Option<PathBuf>,
    },
    /// Decompose a channel-image tensor with DI or TVMD.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "DI")]
        mode: DecompMode,
        #[arg(long)]
        channels: PathBuf,
    },
    /// Run the selected pipelines end to end.
    Run(Common),
    /// Score material-map tensors against the reference.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// `label=path` pairs, or bare paths labelled by file stem.
        #[arg(long = "estimate", required = true)]
        estimates: Vec<String>,
        /// Reference material tensor; defaults to the configured reference.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Check a config and report every problem found.
    Validate(Common),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Experiment TOML; the bundled desk-scale config when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the noise seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated pipeline subset, e.g. `SART-DI,TVM-TVMD`.
    #[arg(long, value_delimiter = ',')]
    pub pipelines: Option<Vec<Pipeline>>,
    /// Replace the geometry with the bundled reduced-size preset.
    #[arg(long)]
    pub desk_scale: bool,
}

impl Common {
    /// The config after applying every override, re-validated.
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => validate_config(DESK_CONFIG)?,
        };
        if let Some(seed) = self.seed {
            config.noise.rng_seed = seed;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(p) = &self.pipelines {
            config.pipelines = p.clone();
        }
        if self.desk_scale {
            config.apply_desk_scale();
        }
        let problems = config.problems();
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(ConfigErrors(problems).into())
        }
    }
}

/// Parses `label=path`, or a bare path labelled by its file stem.
pub fn parse_estimate(s: &str) -> (String, PathBuf) {
    match s.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(s);
            let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| s.to_string());
            (label, path)
        }
    }
}

/// Runs one parsed command; returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Simulate(common) => {
            let m = crate::run::run_simulate(&common.load()?)?;
            println!("wrote {} artifacts", m.artifacts.len());
            Ok(0)
        }
        Command::Reconstruct { common, mode, sinogram } => {
            crate::run::run_reconstruct(&common.load()?, mode, sinogram.as_deref())?;
            Ok(0)
        }
        Command::Decompose { common, mode, channels } => {
            crate::run::run_decompose(&common.load()?, mode, &channels)?;
            Ok(0)
        }
        Command::Run(common) => {
            let out = crate::run::run_experiment(&common.load()?)?;
            if let Some(r) = &out.ranking {
                print!("{}", r.to_table());
            }
            for p in out.manifest.pipelines.iter().filter(|p| p.error.is_some()) {
                eprintln!("{}: {}", p.pipeline, p.error.as_deref().unwrap_or_default());
            }
            Ok(if out.manifest.all_ok() { 0 } else { 1 })
        }
        Command::Metrics {
            common,
            estimates,
            reference,
        } => {
            let estimates: Vec<_> = estimates.iter().map(|s| parse_estimate(s)).collect();
            print!("{}", crate::run::run_metrics(&common.load()?, &estimates, reference.as_deref())?);
            Ok(0)
        }
        Command::Validate(common) => {
            let config = common.load()?;
            config.resolve_inputs().map_err(|e| match e {
                CliError::Config(c) => CliError::Config(c),
                other => other,
            })?;
            println!("config OK ({} pipelines)", config.pipelines.len());
            Ok(0)
        }
    }
}
