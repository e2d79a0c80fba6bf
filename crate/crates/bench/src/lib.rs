//! Shared fixtures for the criterion benches.

use specmd_core::simulate::{make_phantom, mix_channels, synthesize_sinograms};
use specmd_core::{ChannelImageStack, FanBeamGeometry, MaterialMapStack, MixingMatrix, PhantomSpec, Projector, SinogramStack, SpectrumSpec};

pub struct Fixture {
    pub projector: Projector,
    pub mixing: MixingMatrix,
    pub phantom: MaterialMapStack,
    pub channels: ChannelImageStack,
    pub sinogram: SinogramStack,
}

impl Fixture {
    pub fn new(geometry: &FanBeamGeometry) -> Self {
        let projector = Projector::new(geometry).expect("valid geometry");
        let mixing = SpectrumSpec::bundled().mixing_matrix().expect("bundled spectrum");
        let phantom = make_phantom(&PhantomSpec::bundled(), geometry).expect("bundled phantom");
        let channels = mix_channels(&phantom, &mixing).expect("matching materials");
        let sinogram = synthesize_sinograms(&channels, &projector).expect("matching geometry");
        Self {
            projector,
            mixing,
            phantom,
            channels,
            sinogram,
        }
    }

    pub fn desk() -> Self {
        Self::new(&FanBeamGeometry::desk_scale())
    }
}
