//! Implicit fan-beam system matrix.
//!
//! Row `l = view · num_detectors + detector` of `A` holds the exact
//! intersection lengths (cm) of that detector's ray with each pixel, computed
//! with Siddon's incremental plane-crossing traversal. Sinograms are stored
//! view-major, so row `l` is also the flat index of the sinogram sample.
//!
//! Forward projection evaluates each row independently. Back projection
//! scatters rays in a fixed number of contiguous ray blocks into private
//! partial images and sums the partials in block order, so every pixel sees
//! the same floating-point accumulation order whatever the thread count.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::tensor::Tensor3;
use crate::types::{ChannelImageStack, SinogramStack};

/// Rays are scattered in this many blocks during back projection.
const BACK_PROJECTION_BLOCKS: usize = 16;
/// Crossings closer than this (in units of the ray parameter) are merged.
const ALPHA_TOL: f64 = 1e-12;
/// Default memory budget for caching the system matrix.
pub const DEFAULT_CACHE_BYTES: usize = 1 << 30;

const MM_PER_CM: f64 = 10.0;

/// One row of the system matrix in millimetres.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RayIntersectionList {
    /// `(flat pixel index, length_mm)`, sorted by strictly increasing pixel index.
    pub entries: Vec<(usize, f64)>,
    pub total_length_mm: f64,
}

impl RayIntersectionList {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn from_unsorted(mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for (j, len) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == j => last.1 += len,
                _ => merged.push((j, len)),
            }
        }
        let total_length_mm = merged.iter().map(|e| e.1).sum();
        Self {
            entries: merged,
            total_length_mm,
        }
    }
}

/// Pixel grid extents in world millimetres.
#[derive(Debug, Clone, Copy)]
pub struct PixelGrid {
    pub rows: usize,
    pub cols: usize,
    pub pixel_mm: f64,
}

impl PixelGrid {
    pub fn of(geom: &FanBeamGeometry) -> Self {
        Self {
            rows: geom.image_height_px,
            cols: geom.image_width_px,
            pixel_mm: geom.pixel_size_mm,
        }
    }

    fn x_min(&self) -> f64 {
        -0.5 * self.cols as f64 * self.pixel_mm
    }

    fn y_max(&self) -> f64 {
        0.5 * self.rows as f64 * self.pixel_mm
    }

    /// Length of the grid diagonal in millimetres.
    pub fn diagonal_mm(&self) -> f64 {
        (self.cols as f64 * self.pixel_mm).hypot(self.rows as f64 * self.pixel_mm)
    }
}

/// Parameter interval `[lo, hi]` where the line `x0 + α·dx` lies inside `[min, max]`.
fn slab(x0: f64, dx: f64, min: f64, max: f64) -> Option<(f64, f64)> {
    if dx == 0.0 {
        (x0 > min && x0 < max).then_some((f64::NEG_INFINITY, f64::INFINITY))
    } else {
        let a = (min - x0) / dx;
        let b = (max - x0) / dx;
        Some((a.min(b), a.max(b)))
    }
}

/// Plane-crossing iterator state along one axis.
struct Crossings {
    origin: f64,
    delta: f64,
    plane0: f64,
    spacing: f64,
    index: i64,
    step: i64,
}

impl Crossings {
    fn new(origin: f64, delta: f64, plane0: f64, spacing: f64, alpha_start: f64) -> Self {
        let mut c = Self {
            origin,
            delta,
            plane0,
            spacing,
            index: 0,
            step: 0,
        };
        if delta != 0.0 {
            let pos = (origin + alpha_start * delta - plane0) / spacing;
            if delta > 0.0 {
                c.step = 1;
                c.index = pos.ceil() as i64;
            } else {
                c.step = -1;
                c.index = pos.floor() as i64;
            }
            if c.alpha() <= alpha_start + ALPHA_TOL {
                c.index += c.step;
            }
        }
        c
    }

    fn alpha(&self) -> f64 {
        if self.step == 0 {
            f64::INFINITY
        } else {
            (self.plane0 + self.index as f64 * self.spacing - self.origin) / self.delta
        }
    }

    fn advance_past(&mut self, alpha: f64) {
        while self.step != 0 && self.alpha() <= alpha + ALPHA_TOL {
            self.index += self.step;
        }
    }
}

/// Exact intersection lengths of the segment `p0 → p1` with the grid.
pub fn trace_segment(grid: &PixelGrid, p0: [f64; 2], p1: [f64; 2]) -> RayIntersectionList {
    let mut entries = Vec::new();
    trace_segment_into(grid, p0, p1, 1.0, &mut entries);
    RayIntersectionList::from_unsorted(entries)
}

fn trace_segment_into(grid: &PixelGrid, p0: [f64; 2], p1: [f64; 2], weight: f64, out: &mut Vec<(usize, f64)>) {
    let (dx, dy) = (p1[0] - p0[0], p1[1] - p0[1]);
    let length = dx.hypot(dy);
    if length == 0.0 {
        return;
    }
    let px = grid.pixel_mm;
    let x_min = grid.x_min();
    let x_max = -x_min;
    let y_max = grid.y_max();
    let y_min = -y_max;
    let (Some((ax0, ax1)), Some((ay0, ay1))) = (slab(p0[0], dx, x_min, x_max), slab(p0[1], dy, y_min, y_max)) else {
        return;
    };
    let a_start = ax0.max(ay0).max(0.0);
    let a_end = ax1.min(ay1).min(1.0);
    if a_end - a_start <= ALPHA_TOL {
        return;
    }

    let mut xs = Crossings::new(p0[0], dx, x_min, px, a_start);
    let mut ys = Crossings::new(p0[1], dy, y_min, px, a_start);
    let mut a = a_start;
    while a < a_end - ALPHA_TOL {
        let next = xs.alpha().min(ys.alpha()).min(a_end);
        let seg = next - a;
        if seg > ALPHA_TOL {
            let mid = 0.5 * (a + next);
            let x = p0[0] + mid * dx;
            let y = p0[1] + mid * dy;
            let col = (((x - x_min) / px).floor().max(0.0) as usize).min(grid.cols - 1);
            let row = (((y_max - y) / px).floor().max(0.0) as usize).min(grid.rows - 1);
            out.push((row * grid.cols + col, seg * length * weight));
        }
        xs.advance_past(next);
        ys.advance_past(next);
        a = next;
    }
}

fn trace_unchecked(geom: &FanBeamGeometry, grid: &PixelGrid, view: usize, detector: usize) -> RayIntersectionList {
    let sub = geom.rays_per_detector;
    let mut entries = Vec::new();
    let w = 1.0 / sub as f64;
    for s in 0..sub {
        let (src, det) = geom.ray_endpoints(view, detector, s);
        trace_segment_into(grid, src, det, w, &mut entries);
    }
    RayIntersectionList::from_unsorted(entries)
}

/// Intersection lengths (mm) of one detector element's ray with the grid.
pub fn trace_ray(geom: &FanBeamGeometry, view: usize, detector: usize) -> Result<RayIntersectionList> {
    if view >= geom.num_views {
        return Err(Error::IndexOutOfRange {
            what: "view",
            index: view,
            limit: geom.num_views,
        });
    }
    if detector >= geom.num_detectors {
        return Err(Error::IndexOutOfRange {
            what: "detector",
            index: detector,
            limit: geom.num_detectors,
        });
    }
    Ok(trace_unchecked(geom, &PixelGrid::of(geom), view, detector))
}

/// Compressed-row copy of `A` in centimetres.
#[derive(Debug, Clone)]
struct SystemMatrix {
    offsets: Vec<usize>,
    columns: Vec<u32>,
    values: Vec<f64>,
}

/// Rows of `A` for the detectors of a single view.
#[derive(Debug, Clone)]
pub struct ViewRows<'a> {
    offsets: Cow<'a, [usize]>,
    columns: Cow<'a, [u32]>,
    values: Cow<'a, [f64]>,
}

impl ViewRows<'_> {
    pub fn num_rays(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Pixel indices and lengths (cm) of detector `d`.
    pub fn row(&self, d: usize) -> (&[u32], &[f64]) {
        let (lo, hi) = (self.offsets[d], self.offsets[d + 1]);
        (&self.columns[lo..hi], &self.values[lo..hi])
    }
}

/// Per-ray and per-pixel sums of `A`, used to normalise SART updates.
#[derive(Debug, Clone, PartialEq)]
pub struct SartNormalizers {
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    /// Rays that miss the grid.
    pub empty_rays: usize,
    /// Pixels no ray touches.
    pub unseen_pixels: usize,
}

/// Matched forward and back projector for one geometry.
#[derive(Debug, Clone)]
pub struct Projector {
    geometry: FanBeamGeometry,
    grid: PixelGrid,
    cache: Option<SystemMatrix>,
}

impl Projector {
    /// Caches the system matrix when it fits in [`DEFAULT_CACHE_BYTES`].
    pub fn new(geometry: &FanBeamGeometry) -> Result<Self> {
        Self::with_cache_budget(geometry, DEFAULT_CACHE_BYTES)
    }

    /// `budget_bytes = 0` disables caching; rays are then traced on the fly.
    pub fn with_cache_budget(geometry: &FanBeamGeometry, budget_bytes: usize) -> Result<Self> {
        geometry.validate()?;
        let grid = PixelGrid::of(geometry);
        let bound = geometry.num_rays()
            * geometry.rays_per_detector
            * (geometry.image_width_px + geometry.image_height_px + 2)
            * (std::mem::size_of::<u32>() + std::mem::size_of::<f64>());
        let mut p = Self {
            geometry: geometry.clone(),
            grid,
            cache: None,
        };
        if bound <= budget_bytes {
            p.cache = Some(p.build_cache());
        } else {
            log::info!(
                "system matrix bound {} MiB exceeds cache budget; tracing rays on the fly",
                bound >> 20
            );
        }
        Ok(p)
    }

    fn build_cache(&self) -> SystemMatrix {
        let nd = self.geometry.num_detectors;
        let rows: Vec<RayIntersectionList> = (0..self.geometry.num_rays())
            .into_par_iter()
            .map(|l| trace_unchecked(&self.geometry, &self.grid, l / nd, l % nd))
            .collect();
        let nnz = rows.iter().map(|r| r.entries.len()).sum();
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut columns = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        offsets.push(0);
        for r in rows {
            for (j, len) in r.entries {
                columns.push(j as u32);
                values.push(len / MM_PER_CM);
            }
            offsets.push(columns.len());
        }
        SystemMatrix {
            offsets,
            columns,
            values,
        }
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    pub fn is_cached(&self) -> bool {
        self.cache.is_some()
    }

    pub fn num_rays(&self) -> usize {
        self.geometry.num_rays()
    }

    pub fn num_pixels(&self) -> usize {
        self.geometry.num_pixels()
    }

    /// Calls `f(pixel, length_cm)` for every nonzero of row `l`, in pixel order.
    #[inline]
    fn for_row(&self, l: usize, mut f: impl FnMut(usize, f64)) {
        match &self.cache {
            Some(a) => {
                let (lo, hi) = (a.offsets[l], a.offsets[l + 1]);
                for (&j, &v) in a.columns[lo..hi].iter().zip(&a.values[lo..hi]) {
                    f(j as usize, v);
                }
            }
            None => {
                let nd = self.geometry.num_detectors;
                let row = trace_unchecked(&self.geometry, &self.grid, l / nd, l % nd);
                for (j, len) in row.entries {
                    f(j, len / MM_PER_CM);
                }
            }
        }
    }

    /// The rows of `A` that belong to one view.
    pub fn view_rows(&self, view: usize) -> ViewRows<'_> {
        let nd = self.geometry.num_detectors;
        match &self.cache {
            Some(a) => ViewRows {
                offsets: Cow::Borrowed(&a.offsets[view * nd..=(view + 1) * nd]),
                columns: Cow::Borrowed(&a.columns),
                values: Cow::Borrowed(&a.values),
            },
            None => {
                let mut offsets = Vec::with_capacity(nd + 1);
                let mut columns = Vec::new();
                let mut values = Vec::new();
                offsets.push(0);
                for d in 0..nd {
                    for (j, len) in trace_unchecked(&self.geometry, &self.grid, view, d).entries {
                        columns.push(j as u32);
                        values.push(len / MM_PER_CM);
                    }
                    offsets.push(columns.len());
                }
                ViewRows {
                    offsets: Cow::Owned(offsets),
                    columns: Cow::Owned(columns),
                    values: Cow::Owned(values),
                }
            }
        }
    }

    fn check_len(&self, got: usize, expected: usize, what: &str) -> Result<()> {
        if got != expected {
            return Err(shape_err(format!("{what} of {expected} values"), got));
        }
        Ok(())
    }

    /// `A · image` for one channel image (cm⁻¹) → line integrals.
    pub fn forward(&self, image: &[f64]) -> Result<Vec<f64>> {
        self.check_len(image.len(), self.num_pixels(), "image")?;
        let mut out = vec![0.0; self.num_rays()];
        out.par_iter_mut().enumerate().for_each(|(l, p)| {
            let mut acc = 0.0;
            self.for_row(l, |j, a| acc += a * image[j]);
            *p = acc;
        });
        Ok(out)
    }

    /// `Aᵀ · sinogram` for one bin.
    pub fn back(&self, sinogram: &[f64]) -> Result<Vec<f64>> {
        self.check_len(sinogram.len(), self.num_rays(), "sinogram")?;
        let n = self.num_pixels();
        let rays = self.num_rays();
        let block = rays.div_ceil(BACK_PROJECTION_BLOCKS).max(1);
        let partials: Vec<Vec<f64>> = (0..rays.div_ceil(block))
            .into_par_iter()
            .map(|b| {
                let mut img = vec![0.0; n];
                for l in b * block..((b + 1) * block).min(rays) {
                    let y = sinogram[l];
                    if y != 0.0 {
                        self.for_row(l, |j, a| img[j] += a * y);
                    }
                }
                img
            })
            .collect();
        let mut out = vec![0.0; n];
        for part in &partials {
            for (o, v) in out.iter_mut().zip(part) {
                *o += v;
            }
        }
        Ok(out)
    }

    pub fn forward_stack(&self, images: &ChannelImageStack) -> Result<SinogramStack> {
        let [r, c, bins] = images.data().dims();
        if r != self.geometry.image_height_px || c != self.geometry.image_width_px {
            return Err(shape_err(
                format!("{}x{} image", self.geometry.image_height_px, self.geometry.image_width_px),
                format!("{r}x{c}"),
            ));
        }
        let slices = (0..bins)
            .map(|n| self.forward(images.bin(n)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = slices.iter().map(Vec::as_slice).collect();
        let t = Tensor3::from_slices(self.geometry.num_views, self.geometry.num_detectors, &refs)?;
        SinogramStack::new(t, self.geometry.clone())
    }

    pub fn back_stack(&self, sinograms: &SinogramStack) -> Result<ChannelImageStack> {
        let slices = (0..sinograms.num_bins())
            .map(|n| self.back(sinograms.bin(n)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = slices.iter().map(Vec::as_slice).collect();
        let t = Tensor3::from_slices(self.geometry.image_height_px, self.geometry.image_width_px, &refs)?;
        ChannelImageStack::new(t)
    }

    pub fn normalizers(&self) -> SartNormalizers {
        let row_sums = self
            .forward(&vec![1.0; self.num_pixels()])
            .expect("length matches geometry");
        let col_sums = self.back(&vec![1.0; self.num_rays()]).expect("length matches geometry");
        let empty_rays = row_sums.iter().filter(|&&s| s == 0.0).count();
        let unseen_pixels = col_sums.iter().filter(|&&s| s == 0.0).count();
        if unseen_pixels > 0 {
            log::warn!("{unseen_pixels} pixels are not intersected by any ray");
        }
        SartNormalizers {
            row_sums,
            col_sums,
            empty_rays,
            unseen_pixels,
        }
    }
}

/// One-shot forward projection; builds a temporary projector.
pub fn forward_project(image: &[f64], geom: &FanBeamGeometry) -> Result<Vec<f64>> {
    Projector::with_cache_budget(geom, 0)?.forward(image)
}

/// One-shot back projection; builds a temporary projector.
pub fn back_project(sinogram: &[f64], geom: &FanBeamGeometry) -> Result<Vec<f64>> {
    Projector::with_cache_budget(geom, 0)?.back(sinogram)
}

pub fn sart_normalizers(geom: &FanBeamGeometry) -> Result<SartNormalizers> {
    Ok(Projector::new(geom)?.normalizers())
}
