//! Image-quality metrics, line profiles and pipeline ranking.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Image;
use crate::types::MaterialMapStack;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(shape_err(format!("{} values", x.len()), y.len()));
    }
    if x.is_empty() {
        return Err(Error::Metric("empty image".into()));
    }
    Ok(())
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64> {
    mse(x, y).map(f64::sqrt)
}

/// `10·log₁₀(peak² / MSE)`; `f64::INFINITY` when the images agree exactly.
pub fn psnr(x: &[f64], reference: &[f64], peak: f64) -> Result<f64> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::Metric(format!("PSNR peak must be > 0 (got {peak})")));
    }
    let m = mse(x, reference)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|t| *t /= s);
    w
}

/// Separable "valid" filtering with the normalised Gaussian window.
fn filter_valid(img: &[f64], rows: usize, cols: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let oc = cols + 1 - SSIM_WINDOW;
    let or = rows + 1 - SSIM_WINDOW;
    let mut horiz = vec![0.0; rows * oc];
    for r in 0..rows {
        for c in 0..oc {
            horiz[r * oc + c] = taps.iter().enumerate().map(|(k, t)| t * img[r * cols + c + k]).sum();
        }
    }
    let mut out = vec![0.0; or * oc];
    for r in 0..or {
        for c in 0..oc {
            out[r * oc + c] = taps.iter().enumerate().map(|(k, t)| t * horiz[(r + k) * oc + c]).sum();
        }
    }
    out
}

/// Mean structural similarity over every fully contained 11×11 Gaussian
/// window (σ = 1.5, K₁ = 0.01, K₂ = 0.03).
pub fn ssim(x: &Image, reference: &Image, dynamic_range: f64) -> Result<f64> {
    if !x.same_shape(reference) {
        return Err(shape_err(
            format!("{}x{}", reference.rows(), reference.cols()),
            format!("{}x{}", x.rows(), x.cols()),
        ));
    }
    if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
        return Err(Error::Metric(format!("SSIM dynamic range must be > 0 (got {dynamic_range})")));
    }
    let (rows, cols) = (x.rows(), x.cols());
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(Error::Metric(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    if x == reference {
        return Ok(1.0);
    }
    let taps = gaussian_taps();
    let (a, b) = (x.as_slice(), reference.as_slice());
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(p, q)| f(*p, *q)).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, rows, cols, &taps);
    let mu_b = filter_valid(b, rows, cols, &taps);
    let aa = filter_valid(&prod(&|p, _| p * p), rows, cols, &taps);
    let bb = filter_valid(&prod(&|_, q| q * q), rows, cols, &taps);
    let ab = filter_valid(&prod(&|p, q| p * q), rows, cols, &taps);
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Line {
    Row,
    Column,
}

/// Pixel values along one grid row or column.
pub fn extract_profile(img: &Image, line: Line, index: usize) -> Result<Vec<f64>> {
    match line {
        Line::Row if index < img.rows() => Ok(img.as_slice()[index * img.cols()..(index + 1) * img.cols()].to_vec()),
        Line::Column if index < img.cols() => Ok((0..img.rows()).map(|r| img.as_slice()[r * img.cols() + index]).collect()),
        Line::Row => Err(Error::IndexOutOfRange {
            what: "profile row",
            index,
            limit: img.rows(),
        }),
        Line::Column => Err(Error::IndexOutOfRange {
            what: "profile column",
            index,
            limit: img.cols(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialMetrics {
    pub material: String,
    pub rmse: f64,
    /// `f64::INFINITY` for an exact match.
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pipeline_label: String,
    pub per_material: Vec<MaterialMetrics>,
}

impl MetricReport {
    pub fn material(&self, name: &str) -> Option<&MaterialMetrics> {
        self.per_material.iter().find(|m| m.material == name)
    }
}

/// Peak and dynamic range default to the reference maximum of each material;
/// an all-zero reference falls back to 1.
pub fn evaluate(label: &str, estimate: &MaterialMapStack, reference: &MaterialMapStack) -> Result<MetricReport> {
    if estimate.material_names() != reference.material_names() {
        return Err(shape_err(
            format!("{:?}", reference.material_names()),
            format!("{:?}", estimate.material_names()),
        ));
    }
    if estimate.data().dims() != reference.data().dims() {
        return Err(shape_err(
            format!("{:?}", reference.data().dims()),
            format!("{:?}", estimate.data().dims()),
        ));
    }
    let per_material = (0..reference.num_materials())
        .map(|v| {
            let est = estimate.data().image(v);
            let truth = reference.data().image(v);
            let max = truth.as_slice().iter().fold(0.0_f64, |m, &x| m.max(x));
            let peak = if max > 0.0 { max } else { 1.0 };
            Ok(MaterialMetrics {
                material: reference.material_names()[v].clone(),
                rmse: rmse(est.as_slice(), truth.as_slice())?,
                psnr_db: psnr(est.as_slice(), truth.as_slice(), peak)?,
                ssim: ssim(&est, &truth, peak)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        pipeline_label: label.to_string(),
        per_material,
    })
}

fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.10e}")
    }
}

/// Metric CSV: `pipeline,material,rmse,psnr_db,ssim`.
pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("pipeline,material,rmse,psnr_db,ssim\n");
    for r in reports {
        for m in &r.per_material {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.pipeline_label,
                m.material,
                fmt_metric(m.rmse),
                fmt_metric(m.psnr_db),
                fmt_metric(m.ssim)
            );
        }
    }
    s
}

/// Pipelines ordered by RMSE (ascending) for each material.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub materials: Vec<String>,
    /// `order[v]` lists `(pipeline, rmse)` best first.
    pub order: Vec<Vec<(String, f64)>>,
}

impl Ranking {
    pub fn best(&self, material: &str) -> Option<&str> {
        let v = self.materials.iter().position(|m| m == material)?;
        self.order[v].first().map(|(p, _)| p.as_str())
    }

    /// `material,rank,pipeline,rmse`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("material,rank,pipeline,rmse\n");
        for (m, order) in self.materials.iter().zip(&self.order) {
            for (i, (p, e)) in order.iter().enumerate() {
                let _ = writeln!(s, "{m},{},{p},{}", i + 1, fmt_metric(*e));
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self
            .order
            .iter()
            .flatten()
            .map(|(p, _)| p.len())
            .max()
            .unwrap_or(8)
            .max(8);
        let mut s = String::new();
        for (m, order) in self.materials.iter().zip(&self.order) {
            let _ = writeln!(s, "{m}");
            for (i, (p, e)) in order.iter().enumerate() {
                let _ = writeln!(s, "  {}. {p:<width$}  RMSE {e:.4e}", i + 1);
            }
        }
        s
    }
}

/// Ties keep input order.
pub fn compare_pipelines(reports: &[MetricReport]) -> Result<Ranking> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Metric("no metric reports to compare".into()))?;
    let materials: Vec<String> = first.per_material.iter().map(|m| m.material.clone()).collect();
    for r in reports {
        let names: Vec<&str> = r.per_material.iter().map(|m| m.material.as_str()).collect();
        if names != materials.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Metric(format!(
                "report {} covers {names:?}, expected {materials:?}",
                r.pipeline_label
            )));
        }
    }
    let order = (0..materials.len())
        .map(|v| {
            let mut o: Vec<(String, f64)> = reports
                .iter()
                .map(|r| (r.pipeline_label.clone(), r.per_material[v].rmse))
                .collect();
            o.sort_by(|a, b| a.1.total_cmp(&b.1));
            o
        })
        .collect();
    Ok(Ranking { materials, order })
}

/// Profile CSV: `index` followed by one column per labelled series.
pub fn profiles_csv(series: &[(String, Vec<f64>)]) -> Result<String> {
    let len = series.first().map(|s| s.1.len()).unwrap_or(0);
    if let Some((l, s)) = series.iter().find(|s| s.1.len() != len) {
        return Err(shape_err(format!("{len} samples"), format!("{} in {l}", s.len())));
    }
    let mut out = String::from("index");
    for (label, _) in series {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for i in 0..len {
        out.push_str(&i.to_string());
        for (_, s) in series {
            let _ = write!(out, ",{:.17e}", s[i]);
        }
        out.push('\n');
    }
    Ok(out)
}
