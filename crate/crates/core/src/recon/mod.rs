//! Per-bin channel reconstruction: SART and TV-regularised SART (TVM).

pub mod tv;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyze::rmse;
use crate::error::{shape_err, Error, Result};
use crate::projector::{Projector, SartNormalizers};
use crate::tensor::{Image, Tensor3};
use crate::types::{ChannelImageStack, SinogramStack};

pub use tv::{tv_denoise, tv_gradient, tv_objective, total_variation, TvParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReconMode {
    #[serde(rename = "SART")]
    Sart,
    #[serde(rename = "TVM")]
    Tvm,
}

impl fmt::Display for ReconMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sart => "SART",
            Self::Tvm => "TVM",
        })
    }
}

impl FromStr for ReconMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SART" => Ok(Self::Sart),
            "TVM" => Ok(Self::Tvm),
            _ => Err(Error::InvalidParams(format!("unknown reconstruction mode {s:?}"))),
        }
    }
}

/// How a sweep visits the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SartOrdering {
    /// One view at a time, each view's update applied before the next
    /// view is projected.
    #[default]
    Sequential,
    /// Every ray at once: `h ← h + λ · D_col⁻¹ Aᵀ D_row⁻¹ (p − A h)`.
    Simultaneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconParams {
    #[serde(default = "thirty")]
    pub outer_iterations: usize,
    #[serde(default = "unit")]
    pub sart_relaxation: f64,
    #[serde(default)]
    pub sart_ordering: SartOrdering,
    /// `μ_n`, one per energy bin. Ignored by plain SART.
    #[serde(default)]
    pub tv_weight_per_bin: Vec<f64>,
    #[serde(default = "twenty")]
    pub tv_inner_iterations: usize,
    #[serde(default = "tenth")]
    pub tv_step: f64,
    /// Proximal coupling `τ` between the data step and the last TV output.
    #[serde(default)]
    pub coupling_tau: f64,
    #[serde(default = "tiny")]
    pub tv_epsilon: f64,
}

fn thirty() -> usize {
    30
}
fn twenty() -> usize {
    20
}
fn unit() -> f64 {
    1.0
}
fn tenth() -> f64 {
    0.1
}
fn tiny() -> f64 {
    1e-8
}

impl Default for ReconParams {
    fn default() -> Self {
        Self {
            outer_iterations: thirty(),
            sart_relaxation: unit(),
            sart_ordering: SartOrdering::default(),
            tv_weight_per_bin: Vec::new(),
            tv_inner_iterations: twenty(),
            tv_step: tenth(),
            coupling_tau: 0.0,
            tv_epsilon: tiny(),
        }
    }
}

impl ReconParams {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.outer_iterations == 0 {
            out.push("outer_iterations must be >= 1".into());
        }
        if self.tv_inner_iterations == 0 {
            out.push("tv_inner_iterations must be >= 1".into());
        }
        if !(self.sart_relaxation > 0.0 && self.sart_relaxation <= 2.0) {
            out.push(format!("sart_relaxation must lie in (0, 2] (got {})", self.sart_relaxation));
        }
        if self.tv_weight_per_bin.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            out.push("tv_weight_per_bin entries must be finite and >= 0".into());
        }
        if !(self.coupling_tau >= 0.0 && self.coupling_tau.is_finite()) {
            out.push(format!("coupling_tau must be >= 0 (got {})", self.coupling_tau));
        }
        if !(self.tv_step > 0.0 && self.tv_step.is_finite()) {
            out.push(format!("tv_step must be > 0 (got {})", self.tv_step));
        }
        if !(self.tv_epsilon > 0.0 && self.tv_epsilon.is_finite()) {
            out.push(format!("tv_epsilon must be > 0 (got {})", self.tv_epsilon));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(p.join("; ")))
        }
    }

}

/// One row of the reconstruction convergence log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconRecord {
    /// 1-based outer iteration.
    pub iteration: usize,
    pub bin: usize,
    /// `½‖p_n − A h_n‖²` after the iteration.
    pub data_fidelity: f64,
    pub rmse_vs_reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReconLog {
    pub records: Vec<ReconRecord>,
}

impl ReconLog {
    /// Fidelity summed over bins, one entry per iteration.
    pub fn total_fidelity(&self) -> Vec<f64> {
        let iters = self.records.iter().map(|r| r.iteration).max().unwrap_or(0);
        let mut out = vec![0.0; iters];
        for r in &self.records {
            out[r.iteration - 1] += r.data_fidelity;
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,bin,data_fidelity,rmse_vs_reference\n");
        for r in &self.records {
            let rm = r.rmse_vs_reference.map(|v| format!("{v:.17e}")).unwrap_or_default();
            s.push_str(&format!("{},{},{:.17e},{}\n", r.iteration, r.bin, r.data_fidelity, rm));
        }
        s
    }
}

/// `½‖p − q‖²`.
fn half_sq_dist(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

fn check_lengths(h: &[f64], p: &[f64], projector: &Projector, norms: &SartNormalizers) -> Result<()> {
    if h.len() != projector.num_pixels() || norms.col_sums.len() != h.len() {
        return Err(shape_err(format!("{} pixels", projector.num_pixels()), h.len()));
    }
    if p.len() != projector.num_rays() || norms.row_sums.len() != p.len() {
        return Err(shape_err(format!("{} rays", projector.num_rays()), p.len()));
    }
    Ok(())
}

/// Update from a precomputed forward projection `ah = A h`, clipped at zero.
fn sart_update(
    h: &[f64],
    ah: &[f64],
    p: &[f64],
    projector: &Projector,
    norms: &SartNormalizers,
    step: f64,
) -> Result<Vec<f64>> {
    let weighted: Vec<f64> = p
        .iter()
        .zip(ah)
        .zip(&norms.row_sums)
        .map(|((pi, ai), &w)| if w > 0.0 { (pi - ai) / w } else { 0.0 })
        .collect();
    let bp = projector.back(&weighted)?;
    Ok(h.iter()
        .zip(&bp)
        .zip(&norms.col_sums)
        .map(|((hj, bj), &c)| if c > 0.0 { (hj + step * bj / c).max(0.0) } else { hj.max(0.0) })
        .collect())
}

/// Views in visiting order for sequential sweeps: a fixed stride close to
/// the golden section of the view count, so consecutive updates come from
/// well-separated angles.
pub fn view_order(num_views: usize) -> Vec<usize> {
    if num_views <= 2 {
        return (0..num_views).collect();
    }
    let gcd = |mut a: usize, mut b: usize| {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    };
    let mut stride = ((num_views as f64) * 0.381_966_011_250_105).round().max(1.0) as usize;
    while gcd(stride, num_views) != 1 {
        stride += 1;
    }
    (0..num_views).map(|k| k * stride % num_views).collect()
}

/// One view-by-view pass over the data; each view's residual is normalised
/// by its ray lengths and back-projected onto the pixels that view sees.
fn sequential_pass(
    h: &mut [f64],
    p: &[f64],
    projector: &Projector,
    norms: &SartNormalizers,
    relaxation: f64,
    order: &[usize],
) {
    let nd = projector.geometry().num_detectors;
    let mut num = vec![0.0; h.len()];
    let mut den = vec![0.0; h.len()];
    let mut weighted = vec![0.0; nd];
    for &view in order {
        let rows = projector.view_rows(view);
        for (d, w) in weighted.iter_mut().enumerate() {
            let l = view * nd + d;
            let rs = norms.row_sums[l];
            *w = if rs > 0.0 {
                let (cols, vals) = rows.row(d);
                let fwd: f64 = cols.iter().zip(vals).map(|(&j, &a)| a * h[j as usize]).sum();
                (p[l] - fwd) / rs
            } else {
                0.0
            };
        }
        for (d, &w) in weighted.iter().enumerate() {
            let (cols, vals) = rows.row(d);
            for (&j, &a) in cols.iter().zip(vals) {
                num[j as usize] += a * w;
                den[j as usize] += a;
            }
        }
        for d in 0..nd {
            for &j in rows.row(d).0 {
                let j = j as usize;
                if den[j] > 0.0 {
                    h[j] = (h[j] + relaxation * num[j] / den[j]).max(0.0);
                    num[j] = 0.0;
                    den[j] = 0.0;
                }
            }
        }
    }
}

/// One full SART sweep, clipped at zero. With [`SartOrdering::Simultaneous`]
/// this is `h ← max(0, h + λ · D_col⁻¹ Aᵀ D_row⁻¹ (p − A h))`; rays and pixels
/// with a zero normaliser are skipped.
pub fn sart_sweep(
    h: &[f64],
    p: &[f64],
    projector: &Projector,
    norms: &SartNormalizers,
    relaxation: f64,
    ordering: SartOrdering,
) -> Result<Vec<f64>> {
    check_lengths(h, p, projector, norms)?;
    if !(relaxation > 0.0 && relaxation <= 2.0) {
        return Err(Error::InvalidParams(format!("relaxation must lie in (0, 2] (got {relaxation})")));
    }
    match ordering {
        SartOrdering::Simultaneous => {
            let ah = projector.forward(h)?;
            sart_update(h, &ah, p, projector, norms, relaxation)
        }
        SartOrdering::Sequential => {
            let mut out: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
            let order = view_order(projector.geometry().num_views);
            sequential_pass(&mut out, p, projector, norms, relaxation, &order);
            Ok(out)
        }
    }
}

/// Reconstructs one bin from a zero start, calling `on_iteration(k, h, ½‖p − Ah‖²)`
/// after every outer iteration.
pub fn reconstruct_bin(
    p: &[f64],
    projector: &Projector,
    norms: &SartNormalizers,
    params: &ReconParams,
    mode: ReconMode,
    tv_weight: f64,
    mut on_iteration: impl FnMut(usize, &[f64], f64),
) -> Result<Vec<f64>> {
    params.validate()?;
    let geom = projector.geometry();
    let (rows, cols) = (geom.image_height_px, geom.image_width_px);
    let mut h = vec![0.0; projector.num_pixels()];
    check_lengths(&h, p, projector, norms)?;
    let tv = TvParams {
        weight: tv_weight,
        iterations: params.tv_inner_iterations,
        step: params.tv_step,
        epsilon: params.tv_epsilon,
    };
    // the data step is the linearised proximal solve of the coupled
    // subproblem anchored at the last TV output, hence the 1/(1+τ) damping
    let step = match mode {
        ReconMode::Sart => params.sart_relaxation,
        ReconMode::Tvm => params.sart_relaxation / (1.0 + params.coupling_tau),
    };
    let order = view_order(geom.num_views);
    let mut ah = vec![0.0; p.len()];
    for k in 1..=params.outer_iterations {
        match params.sart_ordering {
            SartOrdering::Simultaneous => h = sart_update(&h, &ah, p, projector, norms, step)?,
            SartOrdering::Sequential => sequential_pass(&mut h, p, projector, norms, step, &order),
        }
        if mode == ReconMode::Tvm {
            let img = Image::from_vec(rows, cols, h)?;
            h = tv_denoise(&img, &tv)?.into_vec();
        }
        ah = projector.forward(&h)?;
        on_iteration(k, &h, half_sq_dist(p, &ah));
    }
    Ok(h)
}

/// Reconstructs every bin of `sinograms`. Bins are independent and run in
/// parallel; `reference` (if given) adds per-iteration RMSE to the log.
pub fn reconstruct(
    sinograms: &SinogramStack,
    projector: &Projector,
    params: &ReconParams,
    mode: ReconMode,
    reference: Option<&ChannelImageStack>,
) -> Result<(ChannelImageStack, ReconLog)> {
    params.validate()?;
    if sinograms.geometry() != projector.geometry() {
        return Err(Error::InvalidGeometry("sinogram and projector geometries differ".into()));
    }
    let bins = sinograms.num_bins();
    let weights = match mode {
        ReconMode::Sart => vec![0.0; bins],
        ReconMode::Tvm if params.tv_weight_per_bin.len() == bins => params.tv_weight_per_bin.clone(),
        ReconMode::Tvm => {
            return Err(shape_err(
                format!("{bins} TV weights"),
                params.tv_weight_per_bin.len(),
            ))
        }
    };
    if let Some(r) = reference {
        let geom = projector.geometry();
        let want = [geom.image_height_px, geom.image_width_px, bins];
        if r.data().dims() != want {
            return Err(shape_err(format!("{want:?}"), format!("{:?}", r.data().dims())));
        }
    }
    let norms = projector.normalizers();
    let per_bin: Vec<(Vec<f64>, Vec<ReconRecord>)> = (0..bins)
        .into_par_iter()
        .map(|n| {
            let mut records = Vec::with_capacity(params.outer_iterations);
            let h = reconstruct_bin(
                sinograms.bin(n),
                projector,
                &norms,
                params,
                mode,
                weights[n],
                |k, h, fid| {
                    records.push(ReconRecord {
                        iteration: k,
                        bin: n,
                        data_fidelity: fid,
                        rmse_vs_reference: reference.map(|r| rmse(h, r.bin(n)).expect("shapes checked")),
                    })
                },
            )?;
            Ok((h, records))
        })
        .collect::<Result<_>>()?;
    let geom = projector.geometry();
    let refs: Vec<&[f64]> = per_bin.iter().map(|(h, _)| h.as_slice()).collect();
    let images = ChannelImageStack::new(Tensor3::from_slices(geom.image_height_px, geom.image_width_px, &refs)?)?;
    let mut records: Vec<ReconRecord> = per_bin.into_iter().flat_map(|(_, r)| r).collect();
    records.sort_by_key(|r| (r.iteration, r.bin));
    log::debug!("{mode} reconstruction of {bins} bins finished");
    Ok((images, ReconLog { records }))
}
