//! Image-domain material decomposition: direct inversion (DI) and
//! constrained TV-regularised decomposition (TVMD).

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyze::rmse;
use crate::error::{shape_err, Error, Result};
use crate::recon::tv::{tv_denoise, TvParams};
use crate::tensor::{Image, Tensor3};
use crate::types::{AirMap, ChannelImageStack, MaterialMapStack, MixingMatrix};

/// Slack on `Σm ≤ 1` below which a clipped point counts as feasible. Much
/// tighter than the reporting tolerance so projecting twice is a no-op.
const SUM_SLACK: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecompMode {
    #[serde(rename = "DI")]
    Di,
    #[serde(rename = "TVMD")]
    Tvmd,
}

impl fmt::Display for DecompMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Di => "DI",
            Self::Tvmd => "TVMD",
        })
    }
}

impl FromStr for DecompMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DI" => Ok(Self::Di),
            "TVMD" => Ok(Self::Tvmd),
            _ => Err(Error::InvalidParams(format!("unknown decomposition mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompParams {
    #[serde(default = "thirty")]
    pub outer_iterations: usize,
    /// `δ`, weight of the pull towards the TV estimate.
    #[serde(default = "default_delta")]
    pub coupling_delta: f64,
    /// `λ_v`, one per material. Ignored by DI.
    #[serde(default)]
    pub tv_weight_per_material: Vec<f64>,
    #[serde(default = "twenty")]
    pub tv_inner_iterations: usize,
    #[serde(default = "tenth")]
    pub tv_step: f64,
    #[serde(default = "tiny")]
    pub tv_epsilon: f64,
    #[serde(default = "yes")]
    pub enforce_constraints: bool,
    /// Also project the DI result onto the feasible set.
    #[serde(default)]
    pub project_di: bool,
}

fn thirty() -> usize {
    30
}
fn twenty() -> usize {
    20
}
fn default_delta() -> f64 {
    0.001
}
fn tenth() -> f64 {
    0.1
}
fn tiny() -> f64 {
    1e-8
}
fn yes() -> bool {
    true
}

impl Default for DecompParams {
    fn default() -> Self {
        Self {
            outer_iterations: thirty(),
            coupling_delta: default_delta(),
            tv_weight_per_material: Vec::new(),
            tv_inner_iterations: twenty(),
            tv_step: tenth(),
            tv_epsilon: tiny(),
            enforce_constraints: true,
            project_di: false,
        }
    }
}

impl DecompParams {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.outer_iterations == 0 {
            out.push("outer_iterations must be >= 1".into());
        }
        if self.tv_inner_iterations == 0 {
            out.push("tv_inner_iterations must be >= 1".into());
        }
        if !(self.coupling_delta > 0.0 && self.coupling_delta.is_finite()) {
            out.push(format!("coupling_delta must be > 0 (got {})", self.coupling_delta));
        }
        if self.tv_weight_per_material.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            out.push("tv_weight_per_material entries must be finite and >= 0".into());
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

fn check_bins(h: &ChannelImageStack, b: &MixingMatrix) -> Result<()> {
    if h.num_bins() != b.num_bins() {
        return Err(shape_err(format!("{} energy bins", b.num_bins()), h.num_bins()));
    }
    Ok(())
}

/// `out_v = Σ_n g[v, n] · in_n` for every pixel.
fn apply_per_pixel(g: &DMatrix<f64>, inputs: &[&[f64]], pixels: usize) -> Vec<Vec<f64>> {
    (0..g.nrows())
        .into_par_iter()
        .map(|v| {
            let mut out = vec![0.0; pixels];
            for (n, img) in inputs.iter().enumerate() {
                let coef = g[(v, n)];
                for (o, x) in out.iter_mut().zip(img.iter()) {
                    *o += coef * x;
                }
            }
            out
        })
        .collect()
}

fn stack_from(rows: usize, cols: usize, maps: &[Vec<f64>], names: &[String]) -> Result<MaterialMapStack> {
    let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
    MaterialMapStack::new(Tensor3::from_slices(rows, cols, &refs)?, names.to_vec(), false)
}

/// Least-squares solver `R⁻¹Qᵀ` of a tall full-rank matrix.
fn qr_pseudo_inverse(a: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let qr = a.qr();
    let (q, r) = (qr.q(), qr.r());
    r.solve_upper_triangular(&q.transpose())
        .ok_or_else(|| Error::RankDeficient {
            rank: 0,
            materials: r.ncols(),
        })
}

/// `ℳ₍₃₎ = (BᵀB)⁻¹Bᵀ ℋ₍₃₎`, solved per pixel through a QR factorisation.
/// No constraints are applied.
pub fn direct_inversion(h: &ChannelImageStack, b: &MixingMatrix) -> Result<MaterialMapStack> {
    check_bins(h, b)?;
    b.require_full_column_rank()?;
    let pinv = qr_pseudo_inverse(b.to_nalgebra())?;
    let [rows, cols, bins] = h.data().dims();
    let inputs: Vec<&[f64]> = (0..bins).map(|n| h.bin(n)).collect();
    let maps = apply_per_pixel(&pinv, &inputs, rows * cols);
    stack_from(rows, cols, &maps, b.materials())
}

/// `ℳ₍₃₎ = (BᵀB + δI)⁻¹(Bᵀℋ₍₃₎ + δ𝒲₍₃₎)`, solved as the stacked least-squares
/// problem `[B; √δ I] m ≈ [h; √δ w]`.
pub fn quad_step(
    h: &ChannelImageStack,
    b: &MixingMatrix,
    w: &MaterialMapStack,
    delta: f64,
) -> Result<MaterialMapStack> {
    check_bins(h, b)?;
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParams(format!("coupling δ must be > 0 (got {delta})")));
    }
    if w.num_materials() != b.num_materials() {
        return Err(shape_err(format!("{} materials", b.num_materials()), w.num_materials()));
    }
    let [rows, cols, bins] = h.data().dims();
    if w.data().dims()[..2] != [rows, cols] {
        return Err(shape_err(format!("{rows}x{cols} maps"), format!("{:?}", w.data().dims())));
    }
    let nv = b.num_materials();
    let sd = delta.sqrt();
    let mut aug = DMatrix::zeros(bins + nv, nv);
    aug.view_mut((0, 0), (bins, nv)).copy_from(&b.to_nalgebra());
    for v in 0..nv {
        aug[(bins + v, v)] = sd;
    }
    let mut g = qr_pseudo_inverse(aug)?;
    // fold √δ into the columns acting on w
    for v in 0..nv {
        for r in 0..nv {
            g[(r, bins + v)] *= sd;
        }
    }
    let mut inputs: Vec<&[f64]> = (0..bins).map(|n| h.bin(n)).collect();
    inputs.extend((0..nv).map(|v| w.material(v)));
    let maps = apply_per_pixel(&g, &inputs, rows * cols);
    stack_from(rows, cols, &maps, b.materials())
}

/// Euclidean projection onto `{m ∈ [0,1]^V : Σm ≤ 1}`.
pub fn project_capped_simplex(x: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = x.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    if clipped.iter().sum::<f64>() <= 1.0 + SUM_SLACK {
        return clipped;
    }
    // Σ clip(x − θ, 0, 1) is piecewise linear and non-increasing in θ, with
    // kinks at x_i − 1 and x_i. Find the piece where it crosses 1.
    let g = |theta: f64| x.iter().map(|v| (v - theta).clamp(0.0, 1.0)).sum::<f64>();
    let mut kinks: Vec<f64> = x
        .iter()
        .flat_map(|&v| [v - 1.0, v])
        .filter(|&t| t > 0.0)
        .collect();
    kinks.sort_by(f64::total_cmp);
    kinks.dedup();
    let (mut lo, mut g_lo) = (0.0, g(0.0));
    let mut theta = lo;
    for &hi in &kinks {
        let g_hi = g(hi);
        if g_hi <= 1.0 {
            theta = if g_lo == g_hi { hi } else { lo + (g_lo - 1.0) / (g_lo - g_hi) * (hi - lo) };
            break;
        }
        lo = hi;
        g_lo = g_hi;
    }
    x.iter().map(|v| (v - theta).clamp(0.0, 1.0)).collect()
}

/// Pixel-wise capped-simplex projection plus the derived air fraction.
pub fn project_constraints(m: &MaterialMapStack) -> Result<(MaterialMapStack, AirMap)> {
    let [rows, cols, nv] = m.data().dims();
    let pixels = rows * cols;
    let projected: Vec<Vec<f64>> = (0..pixels)
        .into_par_iter()
        .map(|j| project_capped_simplex(&m.pixel(j)))
        .collect();
    let mut t = Tensor3::zeros(rows, cols, nv);
    for v in 0..nv {
        for (j, p) in projected.iter().enumerate() {
            t.slice_mut(v)[j] = p[v];
        }
    }
    let out = MaterialMapStack::new(t, m.material_names().to_vec(), true)?;
    let air = AirMap::from_materials(&out);
    Ok((out, air))
}

/// `½‖Bℳ₍₃₎ − ℋ₍₃₎‖²_F`.
pub fn decomposition_fidelity(h: &ChannelImageStack, b: &MixingMatrix, m: &MaterialMapStack) -> Result<f64> {
    check_bins(h, b)?;
    let mut total = 0.0;
    for n in 0..b.num_bins() {
        let mut pred = vec![0.0; h.bin(n).len()];
        for v in 0..b.num_materials() {
            let c = b.get(n, v);
            for (p, x) in pred.iter_mut().zip(m.material(v)) {
                *p += c * x;
            }
        }
        total += pred.iter().zip(h.bin(n)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    Ok(0.5 * total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompRecord {
    /// 0 for the initial estimate, then 1-based outer iterations.
    pub iteration: usize,
    pub fidelity: f64,
    pub rmse_per_material: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecompLog {
    pub materials: Vec<String>,
    pub records: Vec<DecompRecord>,
}

impl DecompLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,fidelity");
        for m in &self.materials {
            let _ = write!(s, ",rmse_{m}");
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{},{:.17e}", r.iteration, r.fidelity);
            for v in 0..self.materials.len() {
                match &r.rmse_per_material {
                    Some(e) => {
                        let _ = write!(s, ",{:.17e}", e[v]);
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub maps: MaterialMapStack,
    pub air: AirMap,
    pub log: DecompLog,
}

fn record(
    k: usize,
    h: &ChannelImageStack,
    b: &MixingMatrix,
    m: &MaterialMapStack,
    reference: Option<&MaterialMapStack>,
) -> Result<DecompRecord> {
    let rmse_per_material = reference
        .map(|r| {
            (0..m.num_materials())
                .map(|v| rmse(m.material(v), r.material(v)))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(DecompRecord {
        iteration: k,
        fidelity: decomposition_fidelity(h, b, m)?,
        rmse_per_material,
    })
}

pub fn decompose(
    h: &ChannelImageStack,
    b: &MixingMatrix,
    params: &DecompParams,
    mode: DecompMode,
    reference: Option<&MaterialMapStack>,
) -> Result<Decomposition> {
    params.validate()?;
    let nv = b.num_materials();
    if let Some(r) = reference {
        let [rows, cols, _] = h.data().dims();
        if r.data().dims() != [rows, cols, nv] {
            return Err(shape_err(format!("{:?}", [rows, cols, nv]), format!("{:?}", r.data().dims())));
        }
    }
    let mut log = DecompLog {
        materials: b.materials().to_vec(),
        records: Vec::new(),
    };
    let di = direct_inversion(h, b)?;
    let constrain = params.enforce_constraints;
    let mut m = match mode {
        DecompMode::Di if constrain && params.project_di => project_constraints(&di)?.0,
        DecompMode::Di => di,
        DecompMode::Tvmd if constrain => project_constraints(&di)?.0,
        DecompMode::Tvmd => di,
    };
    log.records.push(record(0, h, b, &m, reference)?);
    if mode == DecompMode::Tvmd {
        if params.tv_weight_per_material.len() != nv {
            return Err(shape_err(format!("{nv} TV weights"), params.tv_weight_per_material.len()));
        }
        let [rows, cols, _] = h.data().dims();
        let mut w = m.clone();
        for k in 1..=params.outer_iterations {
            let q = quad_step(h, b, &w, params.coupling_delta)?;
            m = if constrain { project_constraints(&q)?.0 } else { q };
            let denoised: Vec<Vec<f64>> = (0..nv)
                .into_par_iter()
                .map(|v| {
                    let tv = TvParams {
                        weight: params.tv_weight_per_material[v],
                        iterations: params.tv_inner_iterations,
                        step: params.tv_step,
                        epsilon: params.tv_epsilon,
                    };
                    let img = Image::from_vec(rows, cols, m.material(v).to_vec())?;
                    Ok(tv_denoise(&img, &tv)?.into_vec())
                })
                .collect::<Result<_>>()?;
            w = stack_from(rows, cols, &denoised, b.materials())?;
            log.records.push(record(k, h, b, &m, reference)?);
        }
    }
    let air = AirMap::from_materials(&m);
    Ok(Decomposition { maps: m, air, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use crate::simulate::{mix_channels, SpectrumSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("m{i}")).collect()
    }

    fn random_constrained(rows: usize, cols: usize, nv: usize, seed: u64) -> MaterialMapStack {
        let mut rng = seeded_rng(seed);
        let mut t = Tensor3::zeros(rows, cols, nv);
        for j in 0..rows * cols {
            let mut left = 1.0;
            for v in 0..nv {
                let x = rng.random::<f64>() * left;
                left -= x;
                t.slice_mut(v)[j] = x;
            }
        }
        MaterialMapStack::new(t, names(nv), true).unwrap()
    }

    fn bundled() -> MixingMatrix {
        let b = SpectrumSpec::bundled().mixing_matrix().unwrap();
        MixingMatrix::new(b.matrix().clone(), names(3)).unwrap()
    }

    fn pixel_stack(values: &[f64]) -> MaterialMapStack {
        let slices: Vec<&[f64]> = values.iter().map(std::slice::from_ref).collect();
        MaterialMapStack::new(Tensor3::from_slices(1, 1, &slices).unwrap(), names(values.len()), false).unwrap()
    }

    #[test]
    fn di_recovers_exact_mixtures() {
        let m = random_constrained(16, 16, 3, 0);
        let b = bundled();
        let h = mix_channels(&m, &b).unwrap();
        let d = direct_inversion(&h, &b).unwrap();
        let err = d
            .data()
            .as_slice()
            .iter()
            .zip(m.data().as_slice())
            .fold(0.0_f64, |e, (x, y)| e.max((x - y).abs()));
        assert!(err <= 1e-10, "{err}");
        assert!(!d.is_constrained());
    }

    #[test]
    fn di_identity_and_hand_solved_example() {
        let m = random_constrained(4, 4, 2, 1);
        let eye = MixingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], names(2)).unwrap();
        let h = ChannelImageStack::new(m.data().clone()).unwrap();
        let d = direct_inversion(&h, &eye).unwrap();
        assert_eq!(d.data(), m.data());
        // BᵀB = [[2,1],[1,2]], Bᵀh = (4,5) ⇒ m = (1,2)
        let b = MixingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], names(2)).unwrap();
        let h = ChannelImageStack::new(Tensor3::from_slices(1, 1, &[&[1.0], &[2.0], &[3.0]]).unwrap()).unwrap();
        let d = direct_inversion(&h, &b).unwrap();
        assert!((d.pixel(0)[0] - 1.0).abs() < 1e-14 && (d.pixel(0)[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn di_rejects_bad_mixing() {
        let h = ChannelImageStack::new(Tensor3::zeros(2, 2, 2)).unwrap();
        let under = MixingMatrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]], names(3)).unwrap();
        assert!(matches!(direct_inversion(&h, &under), Err(Error::Underdetermined { .. })));
        let singular = MixingMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]], names(2)).unwrap();
        assert!(matches!(direct_inversion(&h, &singular), Err(Error::RankDeficient { .. })));
        let wrong_bins = MixingMatrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]], names(1)).unwrap();
        assert!(direct_inversion(&h, &wrong_bins).is_err());
    }

    #[test]
    fn quad_step_limits() {
        let b = bundled();
        let m = random_constrained(8, 8, 3, 2);
        let mut rng = seeded_rng(3);
        let noisy: Vec<f64> = mix_channels(&m, &b)
            .unwrap()
            .data()
            .as_slice()
            .iter()
            .map(|v| v + rng.random_range(-0.05..0.05))
            .collect();
        let h = ChannelImageStack::new(Tensor3::from_vec([8, 8, 4], noisy).unwrap()).unwrap();
        let w = random_constrained(8, 8, 3, 4);
        // the deviation from w is about ‖BᵀB‖·|m − w| / δ with ‖BᵀB‖ ≈ 4e4
        // here, so a 1e-6 match needs δ = 1e11 rather than 1e8
        let far = quad_step(&h, &b, &w, 1e11).unwrap();
        let near_w = far.data().as_slice().iter().zip(w.data().as_slice()).all(|(a, c)| (a - c).abs() < 1e-6);
        let dev = far.data().as_slice().iter().zip(w.data().as_slice()).fold(0.0_f64, |e, (a, c)| e.max((a - c).abs()));
        assert!(near_w, "{dev}");
        let di = direct_inversion(&h, &b).unwrap();
        let tiny = quad_step(&h, &b, &w, 1e-12).unwrap();
        let near_di = tiny.data().as_slice().iter().zip(di.data().as_slice()).all(|(a, c)| (a - c).abs() < 1e-4);
        assert!(near_di);
        let fixed = quad_step(&h, &b, &di, 0.001).unwrap();
        let err = fixed
            .data()
            .as_slice()
            .iter()
            .zip(di.data().as_slice())
            .fold(0.0_f64, |e, (a, c)| e.max((a - c).abs()));
        assert!(err < 1e-12, "{err}");
        assert!(quad_step(&h, &b, &w, 0.0).is_err());
    }

    #[test]
    fn quad_step_matches_dense_normal_equations() {
        let b = bundled();
        let mut rng = seeded_rng(5);
        let hv: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..10.0)).collect();
        let wv: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
        let delta = 0.001;
        let slices: Vec<&[f64]> = hv.iter().map(std::slice::from_ref).collect();
        let h = ChannelImageStack::new(Tensor3::from_slices(1, 1, &slices).unwrap()).unwrap();
        let got = quad_step(&h, &b, &pixel_stack(&wv), delta).unwrap().pixel(0);
        // oracle: Gauss-Jordan on the 3×3 regularised normal equations
        let mut a = [[0.0; 4]; 3];
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] = (0..4).map(|n| b.get(n, r) * b.get(n, c)).sum::<f64>() + if r == c { delta } else { 0.0 };
            }
            a[r][3] = (0..4).map(|n| b.get(n, r) * hv[n]).sum::<f64>() + delta * wv[r];
        }
        for p in 0..3 {
            let piv = (p..3).max_by(|&i, &j| a[i][p].abs().total_cmp(&a[j][p].abs())).unwrap();
            a.swap(p, piv);
            for r in 0..3 {
                if r != p {
                    let f = a[r][p] / a[p][p];
                    for c in 0..4 {
                        a[r][c] -= f * a[p][c];
                    }
                }
            }
        }
        for v in 0..3 {
            let want = a[v][3] / a[v][v];
            assert!((got[v] - want).abs() <= 1e-10 * want.abs().max(1.0), "{v}: {} vs {want}", got[v]);
        }
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_capped_simplex(&[0.5, 0.3, 0.1]), [0.5, 0.3, 0.1]);
        assert_eq!(project_capped_simplex(&[1.2, -0.1]), [1.0, 0.0]);
        let p = project_capped_simplex(&[0.8, 0.8]);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        assert_eq!(project_capped_simplex(&[3.0, 2.5, -1.0]), [0.75, 0.25, 0.0]);
        let (m, air) = project_constraints(&pixel_stack(&[0.5, 0.3, 0.1])).unwrap();
        assert_eq!(m.pixel(0), [0.5, 0.3, 0.1]);
        assert!((air.image().as_slice()[0] - 0.1).abs() < 1e-15);
        let (_, air) = project_constraints(&pixel_stack(&[1.2, -0.1])).unwrap();
        assert_eq!(air.image().as_slice()[0], 0.0);
    }

    #[test]
    fn projection_matches_grid_search() {
        let x = [0.8, 0.8];
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for i in 0..=1000 {
            for j in 0..=1000 - i {
                let (a, c) = (i as f64 / 1000.0, j as f64 / 1000.0);
                let d = (a - x[0]).powi(2) + (c - x[1]).powi(2);
                if d < best.0 {
                    best = (d, [a, c]);
                }
            }
        }
        let p = project_capped_simplex(&x);
        assert!((p[0] - best.1[0]).abs() <= 1e-3 && (p[1] - best.1[1]).abs() <= 1e-3);
    }

    #[test]
    fn tvmd_degenerate_limit_is_constrained_di() {
        let b = bundled();
        let m = random_constrained(12, 12, 3, 6);
        let mut rng = seeded_rng(7);
        let noisy: Vec<f64> = mix_channels(&m, &b)
            .unwrap()
            .data()
            .as_slice()
            .iter()
            .map(|v| v + rng.random_range(-0.05..0.05))
            .collect();
        let h = ChannelImageStack::new(Tensor3::from_vec([12, 12, 4], noisy).unwrap()).unwrap();
        let params = DecompParams {
            outer_iterations: 5,
            coupling_delta: 1e-12,
            tv_weight_per_material: vec![0.0; 3],
            ..DecompParams::default()
        };
        let out = decompose(&h, &b, &params, DecompMode::Tvmd, None).unwrap();
        let (want, _) = project_constraints(&direct_inversion(&h, &b).unwrap()).unwrap();
        let err = out
            .maps
            .data()
            .as_slice()
            .iter()
            .zip(want.data().as_slice())
            .fold(0.0_f64, |e, (a, c)| e.max((a - c).abs()));
        assert!(err < 1e-4, "{err}");
        assert_eq!(out.log.records.len(), 6);
    }

    #[test]
    fn outputs_are_feasible_and_conserve_volume() {
        let b = bundled();
        let m = random_constrained(12, 12, 3, 8);
        let mut rng = seeded_rng(9);
        let noisy: Vec<f64> = mix_channels(&m, &b)
            .unwrap()
            .data()
            .as_slice()
            .iter()
            .map(|v| v + rng.random_range(-0.5..0.5))
            .collect();
        let h = ChannelImageStack::new(Tensor3::from_vec([12, 12, 4], noisy).unwrap()).unwrap();
        for (mode, project_di) in [(DecompMode::Tvmd, false), (DecompMode::Di, true)] {
            let params = DecompParams {
                outer_iterations: 4,
                tv_weight_per_material: vec![0.01, 0.05, 0.001],
                project_di,
                ..DecompParams::default()
            };
            let out = decompose(&h, &b, &params, mode, Some(&m)).unwrap();
            assert!(out.maps.is_constrained());
            for j in 0..144 {
                let px = out.maps.pixel(j);
                assert!(px.iter().all(|&v| (0.0..=1.0).contains(&v)));
                let a = out.air.image().as_slice()[j];
                assert!((0.0..=1.0).contains(&a));
                assert!((px.iter().sum::<f64>() + a - 1.0).abs() <= 1e-12);
            }
            assert!(out.log.records.iter().all(|r| r.rmse_per_material.as_ref().unwrap().len() == 3));
        }
        let plain = decompose(&h, &b, &DecompParams::default(), DecompMode::Di, None).unwrap();
        assert!(!plain.maps.is_constrained());
        assert_eq!(plain.log.records.len(), 1);
    }

    #[test]
    fn tvmd_needs_one_weight_per_material() {
        let b = bundled();
        let h = ChannelImageStack::new(Tensor3::zeros(4, 4, 4)).unwrap();
        let params = DecompParams {
            tv_weight_per_material: vec![0.1],
            ..DecompParams::default()
        };
        assert!(decompose(&h, &b, &params, DecompMode::Tvmd, None).is_err());
        assert!("tvmd".parse::<DecompMode>().is_ok());
        assert!("pca".parse::<DecompMode>().is_err());
    }

    #[test]
    fn log_csv_layout() {
        let b = bundled();
        let m = random_constrained(4, 4, 3, 10);
        let h = mix_channels(&m, &b).unwrap();
        let out = decompose(&h, &b, &DecompParams::default(), DecompMode::Di, Some(&m)).unwrap();
        let csv = out.log.to_csv();
        assert!(csv.starts_with("iteration,fidelity,rmse_m0,rmse_m1,rmse_m2\n0,"));
    }

    proptest! {
        #[test]
        fn projection_is_feasible_idempotent_nonexpansive(
            x in prop::collection::vec(-2.0f64..3.0, 1..6),
            dy in prop::collection::vec(-1.0f64..1.0, 6),
        ) {
            let y: Vec<f64> = x.iter().zip(&dy).map(|(a, d)| a + d).collect();
            let (px, py) = (project_capped_simplex(&x), project_capped_simplex(&y));
            prop_assert!(px.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(px.iter().sum::<f64>() <= 1.0 + 1e-12);
            prop_assert_eq!(project_capped_simplex(&px), px.clone());
            let d_in: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let d_out: f64 = px.iter().zip(&py).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d_out <= d_in + 1e-12);
        }

        #[test]
        fn projection_beats_random_feasible_points(x in prop::collection::vec(-1.0f64..2.0, 3), seed in any::<u64>()) {
            let p = project_capped_simplex(&x);
            let dp: f64 = p.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
            let mut rng = seeded_rng(seed);
            for _ in 0..200 {
                let mut q: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
                let s: f64 = q.iter().sum();
                if s > 1.0 {
                    q.iter_mut().for_each(|v| *v /= s);
                }
                let dq: f64 = q.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
                prop_assert!(dp <= dq + 1e-12);
            }
        }
    }
}
