//! Fan-beam scanner description.
//!
//! World coordinates are in millimetres with the rotation axis at the origin,
//! `x` to the right and `y` up. The image grid is centred on the origin; pixel
//! `(row, col)` covers `x ∈ [-W/2 + col·Δ, -W/2 + (col+1)·Δ]` and
//! `y ∈ [H/2 - (row+1)·Δ, H/2 - row·Δ]`, so row 0 is the top of the image.
//!
//! For view angle `β` the source sits at `R·(cos β, sin β)` and the flat
//! detector is perpendicular to the central ray at distance `D` from the
//! source, with element axis `(-sin β, cos β)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanBeamGeometry {
    pub source_to_detector_mm: f64,
    pub source_to_isocenter_mm: f64,
    pub num_views: usize,
    pub num_detectors: usize,
    pub detector_pitch_mm: f64,
    pub image_width_px: usize,
    pub image_height_px: usize,
    pub pixel_size_mm: f64,
    #[serde(default = "full_scan")]
    pub angular_range_rad: f64,
    /// Shift of the detector centre along the element axis, in elements.
    #[serde(default)]
    pub detector_offset_px: f64,
    #[serde(default)]
    pub start_angle_rad: f64,
    /// Sub-rays per detector element; each element's row of the system
    /// matrix is the mean of its sub-ray intersection lengths.
    #[serde(default = "one")]
    pub rays_per_detector: usize,
}

fn full_scan() -> f64 {
    2.0 * PI
}

fn one() -> usize {
    1
}

/// Outcome of [`FanBeamGeometry::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryReport {
    pub fov_radius_mm: f64,
    pub image_half_diagonal_mm: f64,
    /// The image diagonal extends past the scanned field of view.
    pub truncated: bool,
}

impl FanBeamGeometry {
    /// 180/132 mm, 512 × 0.1 mm detector, 640 views over a full scan, and a
    /// 512² grid inscribed in the field of view.
    pub fn paper_analog() -> Self {
        Self {
            source_to_detector_mm: 180.0,
            source_to_isocenter_mm: 132.0,
            num_views: 640,
            num_detectors: 512,
            detector_pitch_mm: 0.1,
            image_width_px: 512,
            image_height_px: 512,
            pixel_size_mm: 0.05,
            angular_range_rad: full_scan(),
            detector_offset_px: 0.0,
            start_angle_rad: 0.0,
            rays_per_detector: 1,
        }
    }

    /// Reduced preset: 128² grid, 256 detectors, 360 views, same physical
    /// extents as [`FanBeamGeometry::paper_analog`].
    pub fn desk_scale() -> Self {
        Self {
            num_views: 360,
            num_detectors: 256,
            detector_pitch_mm: 0.2,
            image_width_px: 128,
            image_height_px: 128,
            pixel_size_mm: 0.2,
            ..Self::paper_analog()
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.image_width_px * self.image_height_px
    }

    pub fn num_rays(&self) -> usize {
        self.num_views * self.num_detectors
    }

    pub fn image_width_mm(&self) -> f64 {
        self.image_width_px as f64 * self.pixel_size_mm
    }

    pub fn image_height_mm(&self) -> f64 {
        self.image_height_px as f64 * self.pixel_size_mm
    }

    /// Checks the hard invariants and reports field-of-view coverage.
    /// Truncation is only a warning.
    pub fn validate(&self) -> Result<GeometryReport> {
        let problems = self.problems();
        if !problems.is_empty() {
            return Err(Error::InvalidGeometry(problems.join("; ")));
        }
        let fov = self.fov_radius_mm();
        let half_diag = 0.5 * self.image_width_mm().hypot(self.image_height_mm());
        let truncated = half_diag > fov;
        if truncated {
            log::warn!(
                "image half-diagonal {half_diag:.3} mm exceeds the field-of-view radius {fov:.3} mm; \
                 corner pixels are not covered by every view"
            );
        }
        Ok(GeometryReport {
            fov_radius_mm: fov,
            image_half_diagonal_mm: half_diag,
            truncated,
        })
    }

    /// Every invariant violation, for aggregated config validation.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = [
            ("source_to_detector_mm", self.source_to_detector_mm),
            ("source_to_isocenter_mm", self.source_to_isocenter_mm),
            ("detector_pitch_mm", self.detector_pitch_mm),
            ("pixel_size_mm", self.pixel_size_mm),
            ("angular_range_rad", self.angular_range_rad),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("{name} must be finite and > 0 (got {v})"));
            }
        }
        let counts = [
            ("num_views", self.num_views),
            ("num_detectors", self.num_detectors),
            ("image_width_px", self.image_width_px),
            ("image_height_px", self.image_height_px),
            ("rays_per_detector", self.rays_per_detector),
        ];
        for (name, v) in counts {
            if v == 0 {
                out.push(format!("{name} must be > 0"));
            }
        }
        if !(self.source_to_detector_mm > self.source_to_isocenter_mm) {
            out.push(format!(
                "source_to_detector_mm ({}) must exceed source_to_isocenter_mm ({})",
                self.source_to_detector_mm, self.source_to_isocenter_mm
            ));
        }
        if !self.detector_offset_px.is_finite() || !self.start_angle_rad.is_finite() {
            out.push("detector_offset_px and start_angle_rad must be finite".into());
        }
        out
    }

    /// Radius of the circle around the isocentre seen by every view.
    pub fn fov_radius_mm(&self) -> f64 {
        let half = 0.5 * self.num_detectors as f64;
        let lo = ((-half + self.detector_offset_px) * self.detector_pitch_mm).abs();
        let hi = ((half + self.detector_offset_px) * self.detector_pitch_mm).abs();
        let edge = lo.min(hi);
        self.source_to_isocenter_mm * (edge / self.source_to_detector_mm).atan().sin()
    }

    pub fn view_angle(&self, view: usize) -> f64 {
        self.start_angle_rad + view as f64 * self.angular_range_rad / self.num_views as f64
    }

    /// Source point and detector point of sub-ray `sub` of element `detector`.
    pub fn ray_endpoints(&self, view: usize, detector: usize, sub: usize) -> ([f64; 2], [f64; 2]) {
        let beta = self.view_angle(view);
        let (sin_b, cos_b) = beta.sin_cos();
        let r = self.source_to_isocenter_mm;
        let source = [r * cos_b, r * sin_b];
        let back = self.source_to_detector_mm - r;
        let centre = [-back * cos_b, -back * sin_b];
        let sub_pos = (sub as f64 + 0.5) / self.rays_per_detector as f64 - 0.5;
        let u = (detector as f64 - 0.5 * (self.num_detectors as f64 - 1.0)
            + self.detector_offset_px
            + sub_pos)
            * self.detector_pitch_mm;
        let point = [centre[0] - u * sin_b, centre[1] + u * cos_b];
        (source, point)
    }
}
