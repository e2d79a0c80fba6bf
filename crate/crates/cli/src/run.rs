//! End-to-end experiment runs and the single-stage subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};
use specmd_core::analyze::{evaluate, extract_profile, metrics_csv, profiles_csv, Line};
use specmd_core::decomp::direct_inversion;
use specmd_core::simulate::{apply_poisson_noise, make_phantom, mix_channels, synthesize_sinograms};
use specmd_core::{
    compare_pipelines, decompose, reconstruct, ChannelImageStack, DecompMode, Decomposition, MaterialMapStack, MetricReport,
    MixingMatrix, Projector, Ranking, ReconLog, ReconMode, SinogramStack, Tensor3,
};

use crate::config::{ExperimentConfig, Inputs, Pipeline, ReferenceMode};
use crate::error::{CliError, Result};
use crate::io::{load_external_sinogram, write_pgm16, write_tensor, write_text};

/// SHA-256 of the canonical TOML form of the effective config.
pub fn config_hash(config: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(config.to_toml().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineOutcome {
    pub pipeline: Pipeline,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seconds: f64,
}

/// `manifest.json` of a run directory. Timings are informational and the
/// only non-reproducible content of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub core_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub reference_mode: ReferenceMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external_sinogram: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamped_counts: Option<usize>,
    pub threads: usize,
    pub stages: Vec<StageTime>,
    pub pipelines: Vec<PipelineOutcome>,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            core_version: specmd_core::VERSION.to_string(),
            config_sha256: config_hash(config),
            seed: config.seed(),
            reference_mode: config.reference_mode,
            external_sinogram: config.external_sinogram.clone(),
            clamped_counts: None,
            threads: rayon::current_num_threads(),
            stages: Vec::new(),
            pipelines: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn all_ok(&self) -> bool {
        self.pipelines.iter().all(|p| p.status == Status::Ok)
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        let seconds = start.elapsed().as_secs_f64();
        info!("{stage}: {seconds:.2} s");
        self.stages.push(StageTime {
            stage: stage.to_string(),
            seconds,
        });
        out
    }
}

/// Everything a run derives from its config before touching data.
pub struct Session {
    pub config: ExperimentConfig,
    pub inputs: Inputs,
    pub projector: Projector,
    pub mixing: MixingMatrix,
    pub phantom: MaterialMapStack,
    pub true_channels: ChannelImageStack,
}

/// The measured data of a run.
pub struct Measurement {
    pub noisy: SinogramStack,
    /// Absent for external sinograms.
    pub clean: Option<SinogramStack>,
    pub clamped_counts: Option<usize>,
}

impl Session {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(crate::error::ConfigErrors(problems).into());
        }
        let inputs = config.resolve_inputs()?;
        let projector = Projector::new(&config.geometry)?;
        let mixing = inputs.spectrum.mixing_matrix()?;
        let phantom = make_phantom(&inputs.phantom, &config.geometry)?;
        let true_channels = mix_channels(&phantom, &mixing)?;
        Ok(Self {
            config: config.clone(),
            inputs,
            projector,
            mixing,
            phantom,
            true_channels,
        })
    }

    pub fn out(&self, rel: &str) -> PathBuf {
        self.config.output_dir.join(rel)
    }

    /// External sinogram, or the phantom's noisy projections.
    pub fn measure(&self) -> Result<Measurement> {
        if let Some(path) = &self.inputs.external_sinogram {
            let noisy = load_external_sinogram(path, &self.config.geometry, self.mixing.num_bins())?;
            return Ok(Measurement {
                noisy,
                clean: None,
                clamped_counts: None,
            });
        }
        let clean = synthesize_sinograms(&self.true_channels, &self.projector)?;
        if self.config.noise_free {
            return Ok(Measurement {
                noisy: clean.clone(),
                clean: Some(clean),
                clamped_counts: None,
            });
        }
        let noisy = apply_poisson_noise(&clean, &self.config.noise, self.config.allow_negative_log)?;
        Ok(Measurement {
            noisy: noisy.sinogram,
            clean: Some(clean),
            clamped_counts: Some(noisy.clamped_counts),
        })
    }

    /// Maps the metrics compare against.
    pub fn reference(&self, clean: Option<&SinogramStack>) -> Result<MaterialMapStack> {
        match self.config.reference_mode {
            ReferenceMode::TruePhantom => Ok(self.phantom.clone()),
            ReferenceMode::PaperAnalog => {
                let owned;
                let clean = match clean {
                    Some(c) => c,
                    None => {
                        owned = synthesize_sinograms(&self.true_channels, &self.projector)?;
                        &owned
                    }
                };
                let (h, _) = reconstruct(clean, &self.projector, &self.config.recon.sart, ReconMode::Sart, None)?;
                Ok(direct_inversion(&h, &self.mixing)?)
            }
        }
    }

    pub fn reconstruct(&self, sinogram: &SinogramStack, mode: ReconMode) -> Result<(ChannelImageStack, ReconLog)> {
        let params = self.config.recon.params(mode);
        Ok(reconstruct(sinogram, &self.projector, params, mode, Some(&self.true_channels))?)
    }

    pub fn decompose(&self, h: &ChannelImageStack, mode: DecompMode, reference: &MaterialMapStack) -> Result<Decomposition> {
        Ok(decompose(h, &self.mixing, self.config.decomp.params(mode), mode, Some(reference))?)
    }

    fn window(&self, material: &str, reference: &[f64]) -> [f64; 2] {
        if let Some(w) = self.config.display.get(material) {
            return *w;
        }
        let lo = reference.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            [lo, hi]
        } else {
            [lo, lo + 1.0]
        }
    }

    /// Writes `<dir>/materials.smdk`, `air.smdk`, one graymap per material
    /// and the convergence CSV.
    pub fn write_decomposition(&self, dir: &str, d: &Decomposition, reference: &MaterialMapStack) -> Result<Vec<String>> {
        let mut written = Vec::new();
        let mut put = |rel: String| {
            written.push(rel.clone());
            self.out(&rel)
        };
        write_tensor(&put(format!("{dir}/materials.smdk")), d.maps.data())?;
        write_tensor(&put(format!("{dir}/air.smdk")), &Tensor3::from_images(&[d.air.image().clone()])?)?;
        for (v, name) in d.maps.material_names().iter().enumerate() {
            let window = self.window(name, reference.material(v));
            write_pgm16(&put(format!("{dir}/{name}.pgm")), &d.maps.data().image(v), window)?;
        }
        write_text(&put(format!("{dir}/convergence.csv")), &d.log.to_csv())?;
        Ok(written)
    }

    pub fn write_recon(&self, dir: &str, h: &ChannelImageStack, log: &ReconLog) -> Result<Vec<String>> {
        let channels = format!("{dir}/channels.smdk");
        let convergence = format!("{dir}/convergence.csv");
        write_tensor(&self.out(&channels), h.data())?;
        write_text(&self.out(&convergence), &log.to_csv())?;
        Ok(vec![channels, convergence])
    }
}

/// Result of [`run_experiment`], kept in memory for callers that want to
/// inspect it without reading the run directory back.
pub struct RunOutput {
    pub manifest: RunManifest,
    pub reports: Vec<MetricReport>,
    pub ranking: Option<Ranking>,
    pub recon_logs: BTreeMap<ReconMode, ReconLog>,
    pub decompositions: BTreeMap<Pipeline, Decomposition>,
    pub reference: MaterialMapStack,
}

fn recon_dir(mode: ReconMode) -> String {
    format!("recon_{mode}")
}

/// Runs every configured pipeline on one shared noisy sinogram and writes
/// all artifacts to the configured output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    let mut manifest = RunManifest::new("run", config);
    let session = manifest.time("setup", || Session::new(config))?;
    let mut artifacts = Vec::new();

    let meas = manifest.time("simulate", || session.measure())?;
    manifest.clamped_counts = meas.clamped_counts;
    write_tensor(&session.out("phantom.smdk"), session.phantom.data())?;
    write_tensor(&session.out("sinogram.smdk"), meas.noisy.data())?;
    artifacts.extend(["phantom.smdk".to_string(), "sinogram.smdk".to_string()]);

    let reference = manifest.time("reference", || session.reference(meas.clean.as_ref()))?;
    write_tensor(&session.out("reference.smdk"), reference.data())?;
    artifacts.push("reference.smdk".into());

    let mut channels: BTreeMap<ReconMode, std::result::Result<ChannelImageStack, String>> = BTreeMap::new();
    let mut recon_logs = BTreeMap::new();
    for mode in [ReconMode::Sart, ReconMode::Tvm] {
        if !config.pipelines.iter().any(|p| p.recon_mode() == mode) {
            continue;
        }
        let result = manifest.time(&format!("reconstruct {mode}"), || session.reconstruct(&meas.noisy, mode));
        match result {
            Ok((h, log)) => {
                artifacts.extend(session.write_recon(&recon_dir(mode), &h, &log)?);
                recon_logs.insert(mode, log);
                channels.insert(mode, Ok(h));
            }
            Err(e) => {
                warn!("{mode} reconstruction failed: {e}");
                channels.insert(mode, Err(format!("{mode} reconstruction failed: {e}")));
            }
        }
    }

    let mut reports = Vec::new();
    let mut decompositions = BTreeMap::new();
    for &pipeline in &config.pipelines {
        let start = Instant::now();
        let result = match &channels[&pipeline.recon_mode()] {
            Ok(h) => session
                .decompose(h, pipeline.decomp_mode(), &reference)
                .and_then(|d| evaluate(pipeline.label(), &d.maps, &reference).map(|r| (d, r)).map_err(CliError::from)),
            Err(e) => Err(CliError::Pipeline(e.clone())),
        };
        let seconds = start.elapsed().as_secs_f64();
        manifest.stages.push(StageTime {
            stage: format!("decompose {pipeline}"),
            seconds,
        });
        let outcome = match result {
            Ok((d, report)) => {
                artifacts.extend(session.write_decomposition(pipeline.label(), &d, &reference)?);
                reports.push(report);
                decompositions.insert(pipeline, d);
                PipelineOutcome {
                    pipeline,
                    status: Status::Ok,
                    error: None,
                    seconds,
                }
            }
            Err(e) => {
                warn!("{pipeline} failed: {e}");
                PipelineOutcome {
                    pipeline,
                    status: Status::Failed,
                    error: Some(e.to_string()),
                    seconds,
                }
            }
        };
        manifest.pipelines.push(outcome);
    }

    let ranking = manifest.time("analyze", || -> Result<Option<Ranking>> {
        if reports.is_empty() {
            return Ok(None);
        }
        write_text(&session.out("metrics.csv"), &metrics_csv(&reports))?;
        let ranking = compare_pipelines(&reports)?;
        write_text(&session.out("ranking.csv"), &ranking.to_csv())?;
        write_text(&session.out("ranking.txt"), &ranking.to_table())?;
        artifacts.extend(["metrics.csv", "ranking.csv", "ranking.txt"].map(String::from));
        for spec in &config.profile {
            let tag = match spec.line {
                Line::Row => "row",
                Line::Column => "column",
            };
            for (v, name) in reference.material_names().iter().enumerate() {
                let mut series = vec![("reference".to_string(), extract_profile(&reference.data().image(v), spec.line, spec.index)?)];
                for (p, d) in &decompositions {
                    series.push((p.label().to_string(), extract_profile(&d.maps.data().image(v), spec.line, spec.index)?));
                }
                let rel = format!("profiles/{tag}{}_{name}.csv", spec.index);
                write_text(&session.out(&rel), &profiles_csv(&series)?)?;
                artifacts.push(rel);
            }
        }
        Ok(Some(ranking))
    })?;

    write_text(&session.out("config.toml"), &config.to_toml())?;
    artifacts.push("config.toml".into());
    artifacts.push("manifest.json".into());
    manifest.artifacts = artifacts;
    write_manifest(&config.output_dir, &manifest)?;
    Ok(RunOutput {
        manifest,
        reports,
        ranking,
        recon_logs,
        decompositions,
        reference,
    })
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serialises");
    write_text(&dir.join("manifest.json"), &(json + "\n"))
}

/// `simulate`: phantom, clean and noisy sinograms.
pub fn run_simulate(config: &ExperimentConfig) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("simulate", config);
    let session = manifest.time("setup", || Session::new(config))?;
    let meas = manifest.time("simulate", || session.measure())?;
    manifest.clamped_counts = meas.clamped_counts;
    write_tensor(&session.out("phantom.smdk"), session.phantom.data())?;
    write_tensor(&session.out("channels_true.smdk"), session.true_channels.data())?;
    write_tensor(&session.out("sinogram.smdk"), meas.noisy.data())?;
    manifest.artifacts = vec!["phantom.smdk".into(), "channels_true.smdk".into(), "sinogram.smdk".into()];
    if let Some(clean) = &meas.clean {
        write_tensor(&session.out("sinogram_clean.smdk"), clean.data())?;
        manifest.artifacts.push("sinogram_clean.smdk".into());
    }
    write_manifest(&config.output_dir, &manifest)?;
    Ok(manifest)
}

/// `reconstruct`: channel images from `sinogram` (or the configured source).
pub fn run_reconstruct(config: &ExperimentConfig, mode: ReconMode, sinogram: Option<&Path>) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("reconstruct", config);
    let session = manifest.time("setup", || Session::new(config))?;
    let p = match sinogram {
        Some(path) => load_external_sinogram(path, &config.geometry, session.mixing.num_bins())?,
        None => manifest.time("simulate", || session.measure())?.noisy,
    };
    let (h, log) = manifest.time(&format!("reconstruct {mode}"), || session.reconstruct(&p, mode))?;
    manifest.artifacts = session.write_recon(&recon_dir(mode), &h, &log)?;
    write_manifest(&config.output_dir, &manifest)?;
    Ok(manifest)
}

/// `decompose`: material maps from a channel-image tensor.
pub fn run_decompose(config: &ExperimentConfig, mode: DecompMode, channels: &Path) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("decompose", config);
    let session = manifest.time("setup", || Session::new(config))?;
    let h = ChannelImageStack::new(Tensor3::load(channels)?)?;
    let reference = manifest.time("reference", || session.reference(None))?;
    let d = manifest.time(&format!("decompose {mode}"), || session.decompose(&h, mode, &reference))?;
    manifest.artifacts = session.write_decomposition(&format!("decomp_{mode}"), &d, &reference)?;
    write_manifest(&config.output_dir, &manifest)?;
    Ok(manifest)
}

/// `metrics`: one report per `(label, material tensor)` against the
/// configured reference (or `reference` if given).
pub fn run_metrics(config: &ExperimentConfig, estimates: &[(String, PathBuf)], reference: Option<&Path>) -> Result<String> {
    let session = Session::new(config)?;
    let reference = match reference {
        Some(path) => MaterialMapStack::new(Tensor3::load(path)?, session.mixing.materials().to_vec(), false)?,
        None => session.reference(None)?,
    };
    let names = reference.material_names().to_vec();
    let reports = estimates
        .iter()
        .map(|(label, path)| {
            let maps = MaterialMapStack::new(Tensor3::load(path)?, names.clone(), false)?;
            Ok(evaluate(label, &maps, &reference)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let csv = metrics_csv(&reports);
    write_text(&session.out("metrics.csv"), &csv)?;
    Ok(csv)
}
