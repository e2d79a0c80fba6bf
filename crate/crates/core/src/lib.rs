//! Spectral CT toolkit: fan-beam simulation, per-bin iterative
//! reconstruction, image-domain material decomposition and image-quality
//! metrics.

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod analyze;
pub mod decomp;
pub mod error;
pub mod geometry;
pub mod projector;
pub mod recon;
pub mod rng;
pub mod simulate;
pub mod tensor;
pub mod types;

pub use analyze::{compare_pipelines, MetricReport, Ranking};
pub use decomp::{decompose, DecompMode, DecompParams, Decomposition};
pub use error::{Error, Result};
pub use geometry::{FanBeamGeometry, GeometryReport};
pub use projector::{Projector, RayIntersectionList, SartNormalizers};
pub use recon::{reconstruct, ReconLog, ReconMode, ReconParams};
pub use simulate::{Ellipse, PhantomSpec, SpectrumSpec};
pub use tensor::{Image, Matrix, Tensor3};
pub use types::{AirMap, ChannelImageStack, MaterialMapStack, MixingMatrix, NoiseModel, SinogramStack};
