//! Smoothed total-variation denoising.
//!
//! Minimises `½‖s − h‖² + w·TV_ε(s)` with
//! `TV_ε(s) = Σ √((∇ₓs)² + (∇ᵧs)² + ε²)`, forward differences and a
//! reflective boundary (the difference leaving the last row or column is 0).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Image;

/// Give up on a step after this many halvings.
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvParams {
    pub weight: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Largest per-pixel move of the first step, as a fraction of the input's
    /// maximum gradient magnitude.
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_iterations() -> usize {
    20
}

fn default_step() -> f64 {
    0.1
}

fn default_epsilon() -> f64 {
    1e-8
}

impl TvParams {
    pub fn new(weight: f64) -> Self {
        Self {
            weight,
            iterations: default_iterations(),
            step: default_step(),
            epsilon: default_epsilon(),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            out.push(format!("TV weight must be finite and >= 0 (got {})", self.weight));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            out.push(format!("TV step must be > 0 (got {})", self.step));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            out.push(format!("TV epsilon must be > 0 (got {})", self.epsilon));
        }
        out
    }
}

/// Per-iteration trace of [`tv_denoise_traced`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TvTrace {
    /// Objective before the first step, then after every accepted step.
    pub objective: Vec<f64>,
    pub halvings: usize,
}

#[inline]
fn diffs(s: &[f64], cols: usize, rows: usize, r: usize, c: usize) -> (f64, f64) {
    let q = r * cols + c;
    let dx = if c + 1 < cols { s[q + 1] - s[q] } else { 0.0 };
    let dy = if r + 1 < rows { s[q + cols] - s[q] } else { 0.0 };
    (dx, dy)
}

/// `TV_ε(s)`.
pub fn total_variation(img: &Image, epsilon: f64) -> f64 {
    let (rows, cols) = (img.rows(), img.cols());
    let s = img.as_slice();
    let e2 = epsilon * epsilon;
    let mut sum = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let (dx, dy) = diffs(s, cols, rows, r, c);
            sum += (dx * dx + dy * dy + e2).sqrt();
        }
    }
    sum
}

/// `½‖s − h‖² + w·TV_ε(s)`.
pub fn tv_objective(s: &Image, h: &Image, weight: f64, epsilon: f64) -> f64 {
    let fit: f64 = s.as_slice().iter().zip(h.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    let tv = if weight == 0.0 { 0.0 } else { total_variation(s, epsilon) };
    0.5 * fit + weight * tv
}

/// Gradient of `TV_ε` with respect to every pixel.
pub fn tv_gradient(img: &Image, epsilon: f64) -> Image {
    let (rows, cols) = (img.rows(), img.cols());
    let s = img.as_slice();
    let e2 = epsilon * epsilon;
    // normalised differences, computed once per pixel
    let mut nx = vec![0.0; s.len()];
    let mut ny = vec![0.0; s.len()];
    for r in 0..rows {
        for c in 0..cols {
            let (dx, dy) = diffs(s, cols, rows, r, c);
            let phi = (dx * dx + dy * dy + e2).sqrt();
            nx[r * cols + c] = dx / phi;
            ny[r * cols + c] = dy / phi;
        }
    }
    Image::from_fn(rows, cols, |r, c| {
        let q = r * cols + c;
        let mut g = -(nx[q] + ny[q]);
        if c > 0 {
            g += nx[q - 1];
        }
        if r > 0 {
            g += ny[q - cols];
        }
        g
    })
}

fn max_gradient_magnitude(img: &Image) -> f64 {
    let (rows, cols) = (img.rows(), img.cols());
    let s = img.as_slice();
    let mut m: f64 = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let (dx, dy) = diffs(s, cols, rows, r, c);
            m = m.max(dx.hypot(dy));
        }
    }
    m
}

/// Normalised steepest descent on the TV objective, starting from `h`.
pub fn tv_denoise(h: &Image, params: &TvParams) -> Result<Image> {
    tv_denoise_traced(h, params).map(|(s, _)| s)
}

pub fn tv_denoise_traced(h: &Image, params: &TvParams) -> Result<(Image, TvTrace)> {
    let problems = params.problems();
    if !problems.is_empty() {
        return Err(Error::InvalidParams(problems.join("; ")));
    }
    let mut trace = TvTrace::default();
    if params.weight == 0.0 || params.iterations == 0 {
        return Ok((h.clone(), trace));
    }
    let (w, eps) = (params.weight, params.epsilon);
    let mut s = h.clone();
    let mut f = tv_objective(&s, h, w, eps);
    trace.objective.push(f);
    let mut t = params.step * max_gradient_magnitude(h);
    if t == 0.0 {
        return Ok((s, trace));
    }
    let mut trial = s.clone();
    for _ in 0..params.iterations {
        let tv_g = tv_gradient(&s, eps);
        let g: Vec<f64> = s
            .as_slice()
            .iter()
            .zip(h.as_slice())
            .zip(tv_g.as_slice())
            .map(|((si, hi), gi)| si - hi + w * gi)
            .collect();
        let gmax = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if gmax == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let scale = t / gmax;
            for ((x, si), gi) in trial.as_mut_slice().iter_mut().zip(s.as_slice()).zip(&g) {
                *x = si - scale * gi;
            }
            let ft = tv_objective(&trial, h, w, eps);
            if ft <= f {
                std::mem::swap(&mut s, &mut trial);
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
            trace.halvings += 1;
        }
        if !accepted {
            break;
        }
        trace.objective.push(f);
    }
    Ok((s, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn random_image(rows: usize, cols: usize, seed: u64) -> Image {
        let mut rng = seeded_rng(seed);
        Image::from_fn(rows, cols, |_, _| rng.random::<f64>())
    }

    fn noisy_step(seed: u64) -> Image {
        let mut rng = seeded_rng(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        Image::from_fn(32, 32, |_, c| if c < 16 { 0.2 } else { 0.8 } + noise.sample(&mut rng))
    }

    #[test]
    fn zero_weight_is_identity() {
        let h = random_image(9, 7, 1);
        let s = tv_denoise(&h, &TvParams::new(0.0)).unwrap();
        assert_eq!(s, h);
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let h = Image::filled(12, 12, 0.37);
        for w in [0.0, 0.1, 10.0] {
            assert_eq!(tv_denoise(&h, &TvParams::new(w)).unwrap(), h);
        }
        assert!(tv_gradient(&h, 1e-8).as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_pixel_and_empty_like_images() {
        let h = Image::filled(1, 1, 2.0);
        assert_eq!(tv_denoise(&h, &TvParams::new(1.0)).unwrap(), h);
        let bad = TvParams { step: 0.0, ..TvParams::new(1.0) };
        assert!(tv_denoise(&h, &bad).is_err());
    }

    #[test]
    fn total_variation_of_a_step_edge() {
        // one vertical edge of height 1 across 8 rows; ε negligible
        let img = Image::from_fn(8, 8, |_, c| if c < 4 { 0.0 } else { 1.0 });
        assert!((total_variation(&img, 1e-12) - 8.0).abs() < 1e-9);
        // single interior spike of height a touches 4 differences: own dx, dy and the
        // left/upper neighbours' differences
        let mut spike = Image::zeros(5, 5);
        spike.as_mut_slice()[12] = 2.0;
        assert!((total_variation(&spike, 1e-12) - (2.0 * 2f64.sqrt() + 2.0 + 2.0)).abs() < 1e-9);
    }

    #[test]
    fn noisy_step_objective_strictly_decreases() {
        let h = noisy_step(3);
        let p = TvParams::new(0.1);
        let (s, trace) = tv_denoise_traced(&h, &p).unwrap();
        assert_eq!(trace.objective.len(), 21);
        for w in trace.objective.windows(2) {
            assert!(w[1] < w[0], "{w:?}");
        }
        assert!(total_variation(&s, p.epsilon) < total_variation(&h, p.epsilon));
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..5 {
            let img = random_image(16, 16, seed);
            let eps = 1e-8;
            let g = tv_gradient(&img, eps);
            let step = 1e-6;
            let mut num = 0.0;
            let mut den = 0.0;
            for q in 0..img.len() {
                let mut plus = img.clone();
                plus.as_mut_slice()[q] += step;
                let mut minus = img.clone();
                minus.as_mut_slice()[q] -= step;
                let fd = (total_variation(&plus, eps) - total_variation(&minus, eps)) / (2.0 * step);
                num += (fd - g.as_slice()[q]).powi(2);
                den += g.as_slice()[q].powi(2);
            }
            let rel = (num / den).sqrt();
            assert!(rel < 1e-5, "seed {seed}: {rel}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn objective_never_increases(
            rows in 2usize..20,
            cols in 2usize..20,
            seed in any::<u64>(),
            weight in 0.0f64..2.0,
            step in 0.01f64..2.0,
        ) {
            let h = random_image(rows, cols, seed);
            let p = TvParams { weight, iterations: 15, step, epsilon: 1e-8 };
            let (s, trace) = tv_denoise_traced(&h, &p).unwrap();
            for w in trace.objective.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert!(tv_objective(&s, &h, weight, 1e-8) <= tv_objective(&h, &h, weight, 1e-8));
        }
    }
}
