//! Ground-truth phantom, channel mixing and noisy sinogram synthesis.

use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::projector::Projector;
use crate::rng::stream_rng;
use crate::tensor::Tensor3;
use crate::types::{ChannelImageStack, MaterialMapStack, MixingMatrix, NoiseModel, SinogramStack, FEASIBILITY_TOL};

/// The bundled thorax-like phantom (TOML).
pub const BUNDLED_PHANTOM: &str = include_str!("../../../data/phantom_thorax.toml");
/// The bundled four-bin, three-material spectrum (TOML).
pub const BUNDLED_SPECTRUM: &str = include_str!("../../../data/spectrum_4bin.toml");

/// One ellipse in normalised image coordinates: `x, y ∈ [-1, 1]` span the
/// image width and height, `y` pointing up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub center_x: f64,
    pub center_y: f64,
    pub semi_axis_a: f64,
    pub semi_axis_b: f64,
    #[serde(default)]
    pub rotation_rad: f64,
    pub material_fractions: Vec<f64>,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation_rad.sin_cos();
        let (u, v) = (x - self.center_x, y - self.center_y);
        let along = u * c + v * s;
        let across = -u * s + v * c;
        (along / self.semi_axis_a).powi(2) + (across / self.semi_axis_b).powi(2) <= 1.0
    }
}

/// Ordered ellipse list; later ellipses paint over earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub materials: Vec<String>,
    #[serde(default, rename = "ellipse")]
    pub ellipses: Vec<Ellipse>,
}

impl PhantomSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn bundled() -> Self {
        Self::from_toml_str(BUNDLED_PHANTOM).expect("bundled phantom is valid")
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.materials.is_empty() {
            out.push("phantom lists no materials".to_string());
        }
        for (i, e) in self.ellipses.iter().enumerate() {
            let name = e.label.clone().unwrap_or_else(|| format!("ellipse {i}"));
            if e.material_fractions.len() != self.materials.len() {
                out.push(format!(
                    "{name}: {} fractions for {} materials",
                    e.material_fractions.len(),
                    self.materials.len()
                ));
            }
            if e.material_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
                out.push(format!("{name}: fractions must lie in [0, 1]"));
            }
            if e.material_fractions.iter().sum::<f64>() > 1.0 + FEASIBILITY_TOL {
                out.push(format!("{name}: fractions sum above 1"));
            }
            if !(e.semi_axis_a > 0.0 && e.semi_axis_b > 0.0) {
                out.push(format!("{name}: semi-axes must be > 0"));
            }
            if ![e.center_x, e.center_y, e.rotation_rad].iter().all(|v| v.is_finite()) {
                out.push(format!("{name}: non-finite centre or rotation"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(p.join("; ")))
        }
    }
}

/// Energy binning and the matching mixing matrix (rows = bins).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSpec {
    pub bin_edges_kev: Vec<f64>,
    pub materials: Vec<String>,
    pub mixing: Vec<Vec<f64>>,
}

impl SpectrumSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn bundled() -> Self {
        Self::from_toml_str(BUNDLED_SPECTRUM).expect("bundled spectrum is valid")
    }

    pub fn num_bins(&self) -> usize {
        self.bin_edges_kev.len().saturating_sub(1)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.bin_edges_kev.len() < 2 {
            out.push("need at least two bin edges".into());
        }
        if self.bin_edges_kev.windows(2).any(|w| !(w[1] > w[0])) {
            out.push("bin edges must be strictly increasing".into());
        }
        if self.mixing.len() != self.num_bins() {
            out.push(format!(
                "mixing has {} rows but there are {} bins",
                self.mixing.len(),
                self.num_bins()
            ));
        }
        if self.mixing.iter().any(|r| r.len() != self.materials.len()) {
            out.push(format!("every mixing row needs {} entries", self.materials.len()));
        }
        if let Err(e) = MixingMatrix::from_rows(&self.mixing, self.materials.clone()) {
            if self.mixing.iter().all(|r| r.len() == self.materials.len()) {
                out.push(e.to_string());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(p.join("; ")))
        }
    }

    pub fn mixing_matrix(&self) -> Result<MixingMatrix> {
        self.validate()?;
        MixingMatrix::from_rows(&self.mixing, self.materials.clone())
    }
}

/// Rasterises the phantom at pixel centres.
pub fn make_phantom(spec: &PhantomSpec, geom: &FanBeamGeometry) -> Result<MaterialMapStack> {
    spec.validate()?;
    let (rows, cols) = (geom.image_height_px, geom.image_width_px);
    let nv = spec.materials.len();
    let mut t = Tensor3::zeros(rows, cols, nv);
    for r in 0..rows {
        let y = 1.0 - (2.0 * r as f64 + 1.0) / rows as f64;
        for c in 0..cols {
            let x = (2.0 * c as f64 + 1.0) / cols as f64 - 1.0;
            if let Some(e) = spec.ellipses.iter().rev().find(|e| e.contains(x, y)) {
                for (v, &f) in e.material_fractions.iter().enumerate() {
                    t.slice_mut(v)[r * cols + c] = f;
                }
            }
        }
    }
    MaterialMapStack::new(t, spec.materials.clone(), true)
}

/// `ℋ₍₃₎ = B · ℳ₍₃₎`.
pub fn mix_channels(maps: &MaterialMapStack, mixing: &MixingMatrix) -> Result<ChannelImageStack> {
    if maps.num_materials() != mixing.num_materials() {
        return Err(shape_err(
            format!("{} materials", mixing.num_materials()),
            maps.num_materials(),
        ));
    }
    let [rows, cols, _] = maps.data().dims();
    let mut out = Tensor3::zeros(rows, cols, mixing.num_bins());
    for n in 0..mixing.num_bins() {
        let h = out.slice_mut(n);
        for v in 0..mixing.num_materials() {
            let b = mixing.get(n, v);
            for (hj, mj) in h.iter_mut().zip(maps.material(v)) {
                *hj += b * mj;
            }
        }
    }
    ChannelImageStack::new(out)
}

/// Noise-free per-bin forward projection.
pub fn synthesize_sinograms(images: &ChannelImageStack, projector: &Projector) -> Result<SinogramStack> {
    projector.forward_stack(images)
}

/// Noisy sinogram plus the number of detector readings raised to the clamp.
#[derive(Debug, Clone)]
pub struct NoisySinogram {
    pub sinogram: SinogramStack,
    pub clamped_counts: usize,
}

/// Beer–Lambert Poisson noise: `c ~ Poisson(I₀·e^{-p})`, `c ← max(c, clamp)`,
/// `p̂ = ln(I₀ / c)`, floored at 0 unless `allow_negative_log` is set.
///
/// Sample `l` of bin `n` draws from stream `n · num_rays + l` of the seed.
pub fn apply_poisson_noise(
    sinogram: &SinogramStack,
    noise: &NoiseModel,
    allow_negative_log: bool,
) -> Result<NoisySinogram> {
    noise.validate()?;
    let data = sinogram.data();
    if let Some((i, &v)) = data.as_slice().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::NegativeLineIntegral { index: i, value: v });
    }
    let i0 = noise.photons_per_ray;
    let clamp = noise.min_counts_clamp as f64;
    let rays = data.slice_len() as u64;
    let results: Vec<(f64, bool)> = data
        .as_slice()
        .par_iter()
        .enumerate()
        .map(|(flat, &p)| {
            let lambda = i0 * (-p).exp();
            let counts = match Poisson::new(lambda) {
                Ok(dist) => {
                    // flat = bin * rays + ray, which is exactly the stream id
                    debug_assert!((flat as u64) < rays * data.num_slices() as u64);
                    let mut rng = stream_rng(noise.rng_seed, flat as u64);
                    dist.sample(&mut rng)
                }
                Err(_) => 0.0,
            };
            let clamped = counts < clamp;
            let c = counts.max(clamp);
            let mut ph = (i0 / c).ln();
            if !allow_negative_log {
                ph = ph.max(0.0);
            }
            (ph, clamped)
        })
        .collect();
    let clamped_counts = results.iter().filter(|r| r.1).count();
    if clamped_counts > 0 {
        log::warn!("{clamped_counts} detector readings clamped to {clamp} counts");
    }
    let t = Tensor3::from_vec(data.dims(), results.into_iter().map(|r| r.0).collect())?;
    Ok(NoisySinogram {
        sinogram: SinogramStack::new(t, sinogram.geometry().clone())?,
        clamped_counts,
    })
}
