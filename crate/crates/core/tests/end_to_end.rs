use proptest::prelude::*;
use rand::Rng;
use specmd_core::analyze::{evaluate, extract_profile, Line};
use specmd_core::decomp::{decomposition_fidelity, direct_inversion};
use specmd_core::recon::tv::total_variation;
use specmd_core::rng::seeded_rng;
use specmd_core::simulate::{apply_poisson_noise, make_phantom, mix_channels, synthesize_sinograms};
use specmd_core::{
    decompose, reconstruct, DecompMode, DecompParams, FanBeamGeometry, NoiseModel, PhantomSpec, Projector, ReconMode,
    ReconParams, SinogramStack, SpectrumSpec, Tensor3,
};

fn small_geometry() -> FanBeamGeometry {
    FanBeamGeometry {
        num_views: 90,
        num_detectors: 96,
        detector_pitch_mm: 0.5,
        image_width_px: 48,
        image_height_px: 48,
        pixel_size_mm: 0.5,
        ..FanBeamGeometry::desk_scale()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn projector_is_adjoint_for_varied_geometries(
        views in 3usize..40,
        dets in 4usize..48,
        px in 4usize..24,
        offset in -2.0f64..2.0,
        start in 0.0f64..6.3,
        range in 0.5f64..6.3,
        sub in 1usize..4,
        seed in any::<u64>(),
    ) {
        let g = FanBeamGeometry {
            num_views: views,
            num_detectors: dets,
            detector_pitch_mm: 12.0 / dets as f64,
            image_width_px: px,
            image_height_px: px + 3,
            pixel_size_mm: 6.0 / px as f64,
            detector_offset_px: offset,
            start_angle_rad: start,
            angular_range_rad: range,
            rays_per_detector: sub,
            ..FanBeamGeometry::desk_scale()
        };
        let proj = Projector::new(&g).unwrap();
        let mut rng = seeded_rng(seed);
        let x: Vec<f64> = (0..g.num_pixels()).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..g.num_rays()).map(|_| rng.random::<f64>()).collect();
        let lhs = dot(&proj.forward(&x).unwrap(), &y);
        let rhs = dot(&x, &proj.back(&y).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()).max(1e-300));
    }
}

#[test]
fn cached_and_traced_projectors_agree() {
    let g = small_geometry();
    let cached = Projector::new(&g).unwrap();
    let traced = Projector::with_cache_budget(&g, 0).unwrap();
    assert!(cached.is_cached() && !traced.is_cached());
    let mut rng = seeded_rng(4);
    let x: Vec<f64> = (0..g.num_pixels()).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = (0..g.num_rays()).map(|_| rng.random::<f64>()).collect();
    assert_eq!(cached.forward(&x).unwrap(), traced.forward(&x).unwrap());
    assert_eq!(cached.back(&y).unwrap(), traced.back(&y).unwrap());
}

#[test]
fn noise_free_small_pipeline_recovers_the_phantom() {
    let g = small_geometry();
    let proj = Projector::new(&g).unwrap();
    let phantom = make_phantom(&PhantomSpec::bundled(), &g).unwrap();
    let b = SpectrumSpec::bundled().mixing_matrix().unwrap();
    let h_true = mix_channels(&phantom, &b).unwrap();
    let p = synthesize_sinograms(&h_true, &proj).unwrap();
    let params = ReconParams::default();
    let (h, log) = reconstruct(&p, &proj, &params, ReconMode::Sart, Some(&h_true)).unwrap();
    let fid = log.total_fidelity();
    assert_eq!(fid.len(), 30);
    assert!(fid[29] < 1e-3 * fid[0], "{fid:?}");
    let maps = direct_inversion(&h, &b).unwrap();
    let report = evaluate("SART-DI", &maps, &phantom).unwrap();
    for m in &report.per_material {
        assert!(m.rmse <= 1e-2, "{}: {}", m.material, m.rmse);
    }
}

#[test]
fn tvmd_on_noisy_small_data_is_feasible_and_smoother_than_di() {
    let g = small_geometry();
    let proj = Projector::new(&g).unwrap();
    let phantom = make_phantom(&PhantomSpec::bundled(), &g).unwrap();
    let b = SpectrumSpec::bundled().mixing_matrix().unwrap();
    let clean = synthesize_sinograms(&mix_channels(&phantom, &b).unwrap(), &proj).unwrap();
    let noisy = apply_poisson_noise(&clean, &NoiseModel::new(5000.0, 3), false).unwrap().sinogram;
    let params = ReconParams {
        outer_iterations: 10,
        ..ReconParams::default()
    };
    let (h, _) = reconstruct(&noisy, &proj, &params, ReconMode::Sart, None).unwrap();
    let di = decompose(&h, &b, &DecompParams::default(), DecompMode::Di, None).unwrap();
    let tp = DecompParams {
        outer_iterations: 15,
        coupling_delta: 0.5,
        tv_weight_per_material: vec![1.0, 1.0, 0.1],
        ..DecompParams::default()
    };
    let tvmd = decompose(&h, &b, &tp, DecompMode::Tvmd, Some(&phantom)).unwrap();
    assert!(tvmd.maps.is_constrained());
    assert!(tvmd.maps.first_infeasible_pixel().is_none());
    assert_eq!(tvmd.log.records.len(), 16);
    let last = tvmd.log.records.last().unwrap();
    assert_eq!(last.fidelity, decomposition_fidelity(&h, &b, &tvmd.maps).unwrap());
    for v in 0..3 {
        let tv = |m: &specmd_core::MaterialMapStack| total_variation(&m.data().image(v), 1e-8);
        assert!(tv(&tvmd.maps) < tv(&di.maps), "material {v}");
    }
    let r_di = evaluate("DI", &di.maps, &phantom).unwrap();
    let r_tvmd = evaluate("TVMD", &tvmd.maps, &phantom).unwrap();
    for (a, b) in r_tvmd.per_material.iter().zip(&r_di.per_material) {
        assert!(a.rmse < b.rmse, "{}: {} vs {}", a.material, a.rmse, b.rmse);
    }
}

#[test]
fn iodine_profile_plateaus_at_insert_fraction() {
    let g = FanBeamGeometry::desk_scale();
    let phantom = make_phantom(&PhantomSpec::bundled(), &g).unwrap();
    let spec = PhantomSpec::bundled();
    let heart = spec.ellipses.iter().find(|e| e.label.as_deref() == Some("heart")).unwrap();
    let fraction = heart.material_fractions[2];
    // row through the heart centre
    let row = ((1.0 - heart.center_y) * g.image_height_px as f64 / 2.0) as usize;
    let profile = extract_profile(&phantom.data().image(2), Line::Row, row).unwrap();
    let plateau = profile.iter().filter(|&&v| v == fraction).count();
    let expected = heart.semi_axis_a * g.image_width_px as f64;
    assert!((plateau as f64 - expected).abs() <= 3.0, "{plateau} vs {expected}");
    assert!(profile.iter().all(|&v| v == 0.0 || v == fraction));
}

#[test]
fn sinogram_tensor_file_round_trip() {
    let g = small_geometry();
    let proj = Projector::new(&g).unwrap();
    let phantom = make_phantom(&PhantomSpec::bundled(), &g).unwrap();
    let b = SpectrumSpec::bundled().mixing_matrix().unwrap();
    let p = synthesize_sinograms(&mix_channels(&phantom, &b).unwrap(), &proj).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.smdk");
    p.data().save(&path).unwrap();
    let back = SinogramStack::new(Tensor3::load(&path).unwrap(), g).unwrap();
    assert_eq!(back, p);
}
