//! Experiment configuration: schema, defaults and validation.
//!
//! A config is a TOML file. Relative paths inside it are resolved against
//! the directory that holds the file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use specmd_core::analyze::Line;
use specmd_core::{DecompMode, DecompParams, FanBeamGeometry, NoiseModel, PhantomSpec, ReconMode, ReconParams, SpectrumSpec};

use crate::error::{CliError, ConfigErrors};

/// Bundled desk-scale benchmark (128², 256 detectors, 360 views).
pub const DESK_CONFIG: &str = include_str!("../../../data/desk.toml");
/// Bundled full-size geometry (512², 512 detectors, 640 views).
pub const PAPER_ANALOG_CONFIG: &str = include_str!("../../../data/paper_analog.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pipeline {
    #[serde(rename = "SART-DI")]
    SartDi,
    #[serde(rename = "TVM-DI")]
    TvmDi,
    #[serde(rename = "SART-TVMD")]
    SartTvmd,
    #[serde(rename = "TVM-TVMD")]
    TvmTvmd,
}

impl Pipeline {
    pub const ALL: [Pipeline; 4] = [Pipeline::SartDi, Pipeline::TvmDi, Pipeline::SartTvmd, Pipeline::TvmTvmd];

    pub fn recon_mode(self) -> ReconMode {
        match self {
            Pipeline::SartDi | Pipeline::SartTvmd => ReconMode::Sart,
            Pipeline::TvmDi | Pipeline::TvmTvmd => ReconMode::Tvm,
        }
    }

    pub fn decomp_mode(self) -> DecompMode {
        match self {
            Pipeline::SartDi | Pipeline::TvmDi => DecompMode::Di,
            Pipeline::SartTvmd | Pipeline::TvmTvmd => DecompMode::Tvmd,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Pipeline::SartDi => "SART-DI",
            Pipeline::TvmDi => "TVM-DI",
            Pipeline::SartTvmd => "SART-TVMD",
            Pipeline::TvmTvmd => "TVM-TVMD",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Pipeline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pipeline::ALL
            .into_iter()
            .find(|p| p.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown pipeline {s:?} (expected one of SART-DI, TVM-DI, SART-TVMD, TVM-TVMD)"))
    }
}

/// Which maps the metrics compare against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMode {
    /// The rasterised phantom.
    #[default]
    TruePhantom,
    /// Noise-free sinogram → SART → DI, with the configured SART settings.
    PaperAnalog,
}

/// An inline spec or a path to a TOML file holding one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    Path(PathBuf),
    Inline(T),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    #[serde(default)]
    pub sart: ReconParams,
    #[serde(default)]
    pub tvm: ReconParams,
}

impl ReconConfig {
    pub fn params(&self, mode: ReconMode) -> &ReconParams {
        match mode {
            ReconMode::Sart => &self.sart,
            ReconMode::Tvm => &self.tvm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompConfig {
    #[serde(default)]
    pub di: DecompParams,
    #[serde(default)]
    pub tvmd: DecompParams,
}

impl DecompConfig {
    pub fn params(&self, mode: DecompMode) -> &DecompParams {
        match mode {
            DecompMode::Di => &self.di,
            DecompMode::Tvmd => &self.tvmd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub line: Line,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pipelines: Vec<Pipeline>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub reference_mode: ReferenceMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_sinogram: Option<PathBuf>,
    #[serde(default)]
    pub allow_negative_log: bool,
    /// Skip Poisson sampling and use the exact line integrals.
    #[serde(default)]
    pub noise_free: bool,
    pub geometry: FanBeamGeometry,
    /// Bundled thorax phantom when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<Source<PhantomSpec>>,
    /// Bundled 4-bin spectrum when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<Source<SpectrumSpec>>,
    pub noise: NoiseModel,
    #[serde(default)]
    pub recon: ReconConfig,
    #[serde(default)]
    pub decomp: DecompConfig,
    /// Graymap window per material name; unlisted materials use their
    /// reference min..max.
    #[serde(default)]
    pub display: BTreeMap<String, [f64; 2]>,
    #[serde(default)]
    pub profile: Vec<ProfileSpec>,
}

/// Phantom and spectrum after reading any referenced files.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs {
    pub phantom: PhantomSpec,
    pub spectrum: SpectrumSpec,
    pub external_sinogram: Option<PathBuf>,
}

const REQUIRED: [&str; 4] = ["pipelines", "output_dir", "geometry", "noise"];
const KNOWN: [&str; 14] = [
    "pipelines",
    "output_dir",
    "reference_mode",
    "external_sinogram",
    "allow_negative_log",
    "noise_free",
    "geometry",
    "phantom",
    "spectrum",
    "noise",
    "recon",
    "decomp",
    "display",
    "profile",
];

fn check_field<T: DeserializeOwned>(table: &toml::Table, key: &str, errors: &mut Vec<String>) {
    if let Some(v) = table.get(key) {
        if let Err(e) = v.clone().try_into::<T>() {
            errors.push(format!("{key}: {}", e.message().trim()));
        }
    }
}

/// Parses and checks a config, reporting every schema and invariant
/// violation at once.
pub fn validate_config(raw: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let table: toml::Table = raw.parse().map_err(|e: toml::de::Error| ConfigErrors(vec![format!("syntax: {}", e.message().trim())]))?;
    let mut errors = Vec::new();
    for key in REQUIRED {
        if !table.contains_key(key) {
            errors.push(format!("{key}: missing required field"));
        }
    }
    for key in table.keys() {
        if !KNOWN.contains(&key.as_str()) {
            errors.push(format!("{key}: unknown field"));
        }
    }
    check_field::<Vec<Pipeline>>(&table, "pipelines", &mut errors);
    check_field::<PathBuf>(&table, "output_dir", &mut errors);
    check_field::<ReferenceMode>(&table, "reference_mode", &mut errors);
    check_field::<PathBuf>(&table, "external_sinogram", &mut errors);
    check_field::<bool>(&table, "allow_negative_log", &mut errors);
    check_field::<bool>(&table, "noise_free", &mut errors);
    check_field::<FanBeamGeometry>(&table, "geometry", &mut errors);
    check_field::<Source<PhantomSpec>>(&table, "phantom", &mut errors);
    check_field::<Source<SpectrumSpec>>(&table, "spectrum", &mut errors);
    check_field::<NoiseModel>(&table, "noise", &mut errors);
    check_field::<ReconConfig>(&table, "recon", &mut errors);
    check_field::<DecompConfig>(&table, "decomp", &mut errors);
    check_field::<BTreeMap<String, [f64; 2]>>(&table, "display", &mut errors);
    check_field::<Vec<ProfileSpec>>(&table, "profile", &mut errors);
    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }
    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigErrors(vec![e.message().trim().to_string()]))?;
    let problems = config.problems();
    if problems.is_empty() {
        Ok(config)
    } else {
        Err(ConfigErrors(problems))
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        validate_config(DESK_CONFIG).expect("bundled desk config is valid")
    }

    pub fn paper_analog() -> Self {
        validate_config(PAPER_ANALOG_CONFIG).expect("bundled full-size config is valid")
    }

    /// Reads `path`, validates it and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config = validate_config(&raw)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.rebase(base);
        Ok(config)
    }

    /// Joins relative input paths onto `base`.
    pub fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(Source::Path(p)) = &mut self.phantom {
            join(p);
        }
        if let Some(Source::Path(p)) = &mut self.spectrum {
            join(p);
        }
        if let Some(p) = &mut self.external_sinogram {
            join(p);
        }
    }

    /// Invariant violations that the schema cannot express. Checks against
    /// the spectrum only when it is inline or bundled.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.pipelines.is_empty() {
            out.push("pipelines: at least one pipeline must be selected".into());
        }
        let unique: BTreeSet<_> = self.pipelines.iter().collect();
        if unique.len() != self.pipelines.len() {
            out.push("pipelines: duplicate entries".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            out.push("output_dir: must not be empty".into());
        }
        out.extend(self.geometry.problems().into_iter().map(|p| format!("geometry: {p}")));
        out.extend(self.noise.problems().into_iter().map(|p| format!("noise: {p}")));
        if let Some(Source::Inline(p)) = &self.phantom {
            out.extend(p.problems().into_iter().map(|p| format!("phantom: {p}")));
        }
        let spectrum = match &self.spectrum {
            None => Some(SpectrumSpec::bundled()),
            Some(Source::Inline(s)) => {
                out.extend(s.problems().into_iter().map(|p| format!("spectrum: {p}")));
                Some(s.clone())
            }
            Some(Source::Path(_)) => None,
        };
        let recon_used = |m: ReconMode| self.pipelines.iter().any(|p| p.recon_mode() == m);
        let decomp_used = |m: DecompMode| self.pipelines.iter().any(|p| p.decomp_mode() == m);
        for (name, mode) in [("sart", ReconMode::Sart), ("tvm", ReconMode::Tvm)] {
            let params = self.recon.params(mode);
            out.extend(params.problems().into_iter().map(|p| format!("recon.{name}: {p}")));
            if let (ReconMode::Tvm, true, Some(s)) = (mode, recon_used(mode), &spectrum) {
                if params.tv_weight_per_bin.len() != s.num_bins() {
                    out.push(format!(
                        "recon.tvm: tv_weight_per_bin has {} entries, spectrum has {} bins",
                        params.tv_weight_per_bin.len(),
                        s.num_bins()
                    ));
                }
            }
        }
        for (name, mode) in [("di", DecompMode::Di), ("tvmd", DecompMode::Tvmd)] {
            let params = self.decomp.params(mode);
            out.extend(params.problems().into_iter().map(|p| format!("decomp.{name}: {p}")));
            if let (DecompMode::Tvmd, true, Some(s)) = (mode, decomp_used(mode), &spectrum) {
                if params.tv_weight_per_material.len() != s.materials.len() {
                    out.push(format!(
                        "decomp.tvmd: tv_weight_per_material has {} entries, spectrum has {} materials",
                        params.tv_weight_per_material.len(),
                        s.materials.len()
                    ));
                }
            }
        }
        for (name, [lo, hi]) in &self.display {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                out.push(format!("display.{name}: window [{lo}, {hi}] must satisfy lo < hi"));
            }
        }
        for (i, p) in self.profile.iter().enumerate() {
            let limit = match p.line {
                Line::Row => self.geometry.image_height_px,
                Line::Column => self.geometry.image_width_px,
            };
            if p.index >= limit {
                out.push(format!("profile[{i}]: index {} out of range (limit {limit})", p.index));
            }
        }
        out
    }

    /// Replaces the geometry with the desk-scale preset and rescales the
    /// profile lines to the new grid.
    pub fn apply_desk_scale(&mut self) {
        let old = self.geometry.clone();
        self.geometry = FanBeamGeometry::desk_scale();
        for p in &mut self.profile {
            let (from, to) = match p.line {
                Line::Row => (old.image_height_px, self.geometry.image_height_px),
                Line::Column => (old.image_width_px, self.geometry.image_width_px),
            };
            if let Some(i) = (p.index * to).checked_div(from) {
                p.index = i.min(to.saturating_sub(1));
            }
        }
    }

    /// Reads referenced phantom and spectrum files and checks that every
    /// referenced path exists.
    pub fn resolve_inputs(&self) -> Result<Inputs, CliError> {
        let mut errors = Vec::new();
        let phantom = match &self.phantom {
            None => Some(PhantomSpec::bundled()),
            Some(Source::Inline(p)) => Some(p.clone()),
            Some(Source::Path(path)) => read_spec(path, PhantomSpec::from_toml_str, "phantom", &mut errors),
        };
        let spectrum = match &self.spectrum {
            None => Some(SpectrumSpec::bundled()),
            Some(Source::Inline(s)) => Some(s.clone()),
            Some(Source::Path(path)) => read_spec(path, SpectrumSpec::from_toml_str, "spectrum", &mut errors),
        };
        if let Some(p) = &self.external_sinogram {
            if !p.is_file() {
                errors.push(format!("external_sinogram: {} does not exist", p.display()));
            }
        }
        if let (Some(p), Some(s)) = (&phantom, &spectrum) {
            if p.materials != s.materials {
                errors.push(format!("phantom materials {:?} differ from spectrum materials {:?}", p.materials, s.materials));
            }
            // re-run the count checks now that the spectrum is known
            let mut with_spectrum = self.clone();
            with_spectrum.spectrum = Some(Source::Inline(s.clone()));
            errors.extend(with_spectrum.problems().into_iter().filter(|e| !self.problems().contains(e)));
        }
        match (phantom, spectrum) {
            (Some(phantom), Some(spectrum)) if errors.is_empty() => Ok(Inputs {
                phantom,
                spectrum,
                external_sinogram: self.external_sinogram.clone(),
            }),
            _ => Err(ConfigErrors(errors).into()),
        }
    }

    /// Canonical TOML text of the effective config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn seed(&self) -> u64 {
        self.noise.rng_seed
    }
}

fn read_spec<T>(
    path: &Path,
    parse: fn(&str) -> specmd_core::Result<T>,
    what: &str,
    errors: &mut Vec<String>,
) -> Option<T> {
    match std::fs::read_to_string(path) {
        Ok(text) => match parse(&text) {
            Ok(spec) => Some(spec),
            Err(e) => {
                errors.push(format!("{what}: {}: {e}", path.display()));
                None
            }
        },
        Err(e) => {
            errors.push(format!("{what}: cannot read {}: {e}", path.display()));
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_validate() {
        let desk = ExperimentConfig::desk();
        assert_eq!(desk.pipelines, Pipeline::ALL.to_vec());
        assert_eq!(desk.geometry, FanBeamGeometry::desk_scale());
        let full = ExperimentConfig::paper_analog();
        assert_eq!(full.geometry, FanBeamGeometry::paper_analog());
        assert_eq!(full.noise.photons_per_ray, 5000.0);
        assert_eq!(full.recon.sart.outer_iterations, 30);
    }

    #[test]
    fn missing_pipelines_is_named() {
        let raw = DESK_CONFIG.replace("pipelines = [\"SART-DI\", \"TVM-DI\", \"SART-TVMD\", \"TVM-TVMD\"]", "");
        let err = validate_config(&raw).unwrap_err();
        assert_eq!(err.0, vec!["pipelines: missing required field".to_string()]);
    }

    #[test]
    fn negative_photon_count_is_an_invariant_error() {
        let raw = DESK_CONFIG.replace("photons_per_ray = 5000.0", "photons_per_ray = -5.0");
        let err = validate_config(&raw).unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert!(err.0[0].starts_with("noise: photons_per_ray"), "{err}");
    }

    #[test]
    fn all_errors_are_reported_together() {
        let raw = "extra = true\n".to_string()
            + &DESK_CONFIG
                .replace("pipelines = [\"SART-DI\", \"TVM-DI\", \"SART-TVMD\", \"TVM-TVMD\"]", "pipelines = [\"FBP-DI\"]")
                .replace("num_views = 360", "num_views = \"many\"")
                .replace("coupling_delta = 0.5", "coupling_delta = 0.5\nbogus = 1");
        let err = validate_config(&raw).unwrap_err();
        let text = err.to_string();
        for needle in ["extra: unknown field", "pipelines:", "geometry:", "decomp:"] {
            assert!(text.contains(needle), "{needle} not in {text}");
        }
        assert_eq!(err.0.len(), 4, "{text}");

        let raw = DESK_CONFIG
            .replace("photons_per_ray = 5000.0", "photons_per_ray = 0.0")
            .replace("pixel_size_mm = 0.2", "pixel_size_mm = -0.2")
            .replace("tv_weight_per_bin = [0.1, 0.1, 0.1, 0.1]", "tv_weight_per_bin = [0.1]")
            .replace("iodine = [0.0007, 0.003]", "iodine = [0.003, 0.0007]")
            .replace("index = 64", "index = 500");
        let err = validate_config(&raw).unwrap_err();
        for needle in ["noise:", "geometry:", "recon.tvm:", "display.iodine", "profile[1]"] {
            assert!(err.0.iter().any(|e| e.starts_with(needle)), "{needle} not in {err}");
        }
    }

    #[test]
    fn syntax_error_is_reported() {
        let err = validate_config("pipelines = [").unwrap_err();
        assert!(err.0[0].starts_with("syntax:"));
    }

    #[test]
    fn empty_or_duplicate_pipelines_rejected() {
        let mut c = ExperimentConfig::desk();
        c.pipelines.clear();
        assert!(c.problems().iter().any(|p| p.contains("at least one")));
        c.pipelines = vec![Pipeline::SartDi, Pipeline::SartDi];
        assert!(c.problems().iter().any(|p| p.contains("duplicate")));
    }

    #[test]
    fn weight_counts_only_checked_for_used_modes() {
        let mut c = ExperimentConfig::desk();
        c.recon.tvm.tv_weight_per_bin = vec![0.1];
        c.decomp.tvmd.tv_weight_per_material.clear();
        assert_eq!(c.problems().len(), 2);
        c.pipelines = vec![Pipeline::SartDi];
        assert!(c.problems().is_empty());
    }

    #[test]
    fn pipeline_names_round_trip() {
        for p in Pipeline::ALL {
            assert_eq!(p.label().parse::<Pipeline>().unwrap(), p);
            assert_eq!(p.to_string().to_lowercase().parse::<Pipeline>().unwrap(), p);
        }
        assert!("FBP".parse::<Pipeline>().is_err());
        assert_eq!(Pipeline::TvmTvmd.recon_mode(), ReconMode::Tvm);
        assert_eq!(Pipeline::SartTvmd.decomp_mode(), DecompMode::Tvmd);
    }

    #[test]
    fn toml_round_trip() {
        for c in [ExperimentConfig::desk(), ExperimentConfig::paper_analog()] {
            assert_eq!(validate_config(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn desk_scale_rescales_profiles() {
        let mut c = ExperimentConfig::paper_analog();
        c.apply_desk_scale();
        assert_eq!(c.geometry, FanBeamGeometry::desk_scale());
        assert_eq!(c.profile[0].index, 218 * 128 / 512);
        assert_eq!(c.profile[1].index, 64);
        assert!(c.problems().is_empty());
    }

    #[test]
    fn inline_and_file_sources() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("ph.toml"), specmd_core::simulate::BUNDLED_PHANTOM).unwrap();
        let raw = format!("phantom = \"ph.toml\"\n{DESK_CONFIG}");
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, raw).unwrap();
        let c = ExperimentConfig::load(&path).unwrap();
        assert_eq!(c.phantom, Some(Source::Path(dir.path().join("ph.toml"))));
        assert_eq!(c.resolve_inputs().unwrap().phantom, PhantomSpec::bundled());

        let mut missing = c.clone();
        missing.phantom = Some(Source::Path(dir.path().join("nope.toml")));
        missing.external_sinogram = Some(dir.path().join("nope.smdk"));
        let err = missing.resolve_inputs().unwrap_err().to_string();
        assert!(err.contains("nope.toml") && err.contains("nope.smdk"), "{err}");
    }
}
