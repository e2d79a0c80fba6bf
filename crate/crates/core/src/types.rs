//! Domain containers shared by every stage of the pipeline.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::tensor::{Image, Matrix, Tensor3};

/// Tolerance used when checking the volume-fraction constraints.
pub const FEASIBILITY_TOL: f64 = 1e-12;

fn ensure_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidParams(format!(
            "{what} contains a non-finite value at flat index {i}"
        ))),
        None => Ok(()),
    }
}

/// Log-domain projections, dims `[views, detectors, bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SinogramStack {
    data: Tensor3,
    geometry: FanBeamGeometry,
}

impl SinogramStack {
    pub fn new(data: Tensor3, geometry: FanBeamGeometry) -> Result<Self> {
        let [v, d, _] = data.dims();
        if v != geometry.num_views || d != geometry.num_detectors {
            return Err(shape_err(
                format!("{} views x {} detectors", geometry.num_views, geometry.num_detectors),
                format!("{v} x {d}"),
            ));
        }
        ensure_finite(data.as_slice(), "sinogram")?;
        Ok(Self { data, geometry })
    }

    pub fn data(&self) -> &Tensor3 {
        &self.data
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    pub fn num_bins(&self) -> usize {
        self.data.num_slices()
    }

    pub fn bin(&self, n: usize) -> &[f64] {
        self.data.slice(n)
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.data
    }
}

/// Reconstructed attenuation images (cm⁻¹), dims `[rows, cols, bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImageStack {
    data: Tensor3,
}

impl ChannelImageStack {
    pub fn new(data: Tensor3) -> Result<Self> {
        ensure_finite(data.as_slice(), "channel images")?;
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor3 {
        &self.data
    }

    pub fn num_bins(&self) -> usize {
        self.data.num_slices()
    }

    pub fn bin(&self, n: usize) -> &[f64] {
        self.data.slice(n)
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.data
    }
}

/// Per-material volume fractions, dims `[rows, cols, materials]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialMapStack {
    data: Tensor3,
    material_names: Vec<String>,
    constrained: bool,
}

impl MaterialMapStack {
    /// When `constrained` is set the box and volume-conservation constraints
    /// are verified to [`FEASIBILITY_TOL`].
    pub fn new(data: Tensor3, material_names: Vec<String>, constrained: bool) -> Result<Self> {
        if material_names.len() != data.num_slices() {
            return Err(shape_err(
                format!("{} material names", data.num_slices()),
                material_names.len(),
            ));
        }
        ensure_finite(data.as_slice(), "material maps")?;
        let out = Self {
            data,
            material_names,
            constrained,
        };
        if constrained {
            if let Some(p) = out.first_infeasible_pixel() {
                return Err(Error::InvalidParams(format!(
                    "material fractions at pixel {p} violate 0 <= m <= 1, sum <= 1"
                )));
            }
        }
        Ok(out)
    }

    pub fn data(&self) -> &Tensor3 {
        &self.data
    }

    pub fn material_names(&self) -> &[String] {
        &self.material_names
    }

    pub fn is_constrained(&self) -> bool {
        self.constrained
    }

    pub fn num_materials(&self) -> usize {
        self.data.num_slices()
    }

    pub fn material(&self, v: usize) -> &[f64] {
        self.data.slice(v)
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.data
    }

    /// Fraction vector of one pixel (flat index).
    pub fn pixel(&self, j: usize) -> Vec<f64> {
        (0..self.num_materials()).map(|v| self.material(v)[j]).collect()
    }

    pub fn first_infeasible_pixel(&self) -> Option<usize> {
        let n = self.data.slice_len();
        (0..n).find(|&j| {
            let mut sum = 0.0;
            for v in 0..self.num_materials() {
                let m = self.material(v)[j];
                if !(-FEASIBILITY_TOL..=1.0 + FEASIBILITY_TOL).contains(&m) {
                    return true;
                }
                sum += m;
            }
            sum > 1.0 + FEASIBILITY_TOL
        })
    }
}

/// Air fraction `1 − Σ_v m_v` of a material stack.
#[derive(Debug, Clone, PartialEq)]
pub struct AirMap {
    data: Image,
}

impl AirMap {
    /// Derives air from volume conservation. Values are clamped to `[0, 1]`,
    /// which is exact for constrained stacks.
    pub fn from_materials(m: &MaterialMapStack) -> Self {
        let [rows, cols, _] = m.data.dims();
        let mut air = vec![1.0; rows * cols];
        for v in 0..m.num_materials() {
            for (a, x) in air.iter_mut().zip(m.material(v)) {
                *a -= x;
            }
        }
        for a in &mut air {
            *a = a.clamp(0.0, 1.0);
        }
        Self {
            data: Image::from_vec(rows, cols, air).expect("shape from stack"),
        }
    }

    pub fn image(&self) -> &Image {
        &self.data
    }
}

/// Bin-averaged attenuation `b_vn` (cm⁻¹): `bins × materials`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    data: Matrix,
    materials: Vec<String>,
}

impl MixingMatrix {
    pub fn new(data: Matrix, materials: Vec<String>) -> Result<Self> {
        if materials.len() != data.cols() {
            return Err(shape_err(format!("{} material names", data.cols()), materials.len()));
        }
        if data.rows() == 0 || data.cols() == 0 {
            return Err(Error::InvalidSpec("mixing matrix is empty".into()));
        }
        if let Some(v) = data.as_slice().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidSpec(format!(
                "mixing coefficients must be finite and >= 0 (found {v})"
            )));
        }
        Ok(Self { data, materials })
    }

    pub fn from_rows(rows: &[Vec<f64>], materials: Vec<String>) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?, materials)
    }

    /// Reads an `N × V × 1` tensor; materials are named `m0, m1, ...`.
    pub fn from_tensor(t: &Tensor3) -> Result<Self> {
        let [n, v, k] = t.dims();
        if k != 1 {
            return Err(shape_err("N x V x 1 tensor", format!("{:?}", t.dims())));
        }
        let names = (0..v).map(|i| format!("m{i}")).collect();
        Self::new(Matrix::from_vec(n, v, t.as_slice().to_vec())?, names)
    }

    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3::from_vec([self.num_bins(), self.num_materials(), 1], self.data.as_slice().to_vec())
            .expect("matrix shape")
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn materials(&self) -> &[String] {
        &self.materials
    }

    pub fn num_bins(&self) -> usize {
        self.data.rows()
    }

    pub fn num_materials(&self) -> usize {
        self.data.cols()
    }

    pub fn get(&self, bin: usize, material: usize) -> f64 {
        self.data.row(bin)[material]
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.num_bins(), self.num_materials(), self.data.as_slice())
    }

    fn singular_values(&self) -> Vec<f64> {
        self.to_nalgebra().singular_values().iter().copied().collect()
    }

    /// Numerical rank with the usual `max(N, V) · ε · σ_max` cutoff.
    pub fn rank(&self) -> usize {
        let sv = self.singular_values();
        let smax = sv.iter().copied().fold(0.0, f64::max);
        let tol = smax * self.num_bins().max(self.num_materials()) as f64 * f64::EPSILON;
        sv.iter().filter(|&&s| s > tol).count()
    }

    /// 2-norm condition number `σ_max / σ_min` (infinite when rank deficient).
    pub fn condition_number(&self) -> f64 {
        let sv = self.singular_values();
        let smax = sv.iter().copied().fold(0.0, f64::max);
        let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
        if smin == 0.0 {
            f64::INFINITY
        } else {
            smax / smin
        }
    }

    /// Errors unless the matrix has full column rank with `N ≥ V`.
    pub fn require_full_column_rank(&self) -> Result<()> {
        let (n, v) = (self.num_bins(), self.num_materials());
        if n < v {
            return Err(Error::Underdetermined { bins: n, materials: v });
        }
        let rank = self.rank();
        if rank < v {
            return Err(Error::RankDeficient { rank, materials: v });
        }
        Ok(())
    }
}

/// Beer–Lambert photon statistics for noise synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Incident photons per ray and energy bin (I₀).
    pub photons_per_ray: f64,
    pub rng_seed: u64,
    #[serde(default = "default_clamp")]
    pub min_counts_clamp: u64,
}

fn default_clamp() -> u64 {
    1
}

impl NoiseModel {
    pub fn new(photons_per_ray: f64, rng_seed: u64) -> Self {
        Self {
            photons_per_ray,
            rng_seed,
            min_counts_clamp: 1,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.photons_per_ray.is_finite() && self.photons_per_ray >= 1.0) {
            out.push(format!("photons_per_ray must be >= 1 (got {})", self.photons_per_ray));
        }
        if self.min_counts_clamp == 0 {
            out.push("min_counts_clamp must be >= 1".into());
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
