use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retina_nav::phantom::{
    collision_check, render_topdown, scleral_force, SigmaBreakpoint, TOOL_TIP_RADIUS,
};
use retina_nav::{CameraModel, DepthOracle, EyePhantom, OracleConfig, PhantomConfig, ToolState};

fn phantom_with_axes(axes: [f64; 3]) -> EyePhantom {
    PhantomConfig {
        retina_semi_axes: axes,
        ..PhantomConfig::default()
    }
    .phantom()
    .unwrap()
}

/// Nearest distance from `p` to a dense latitude/longitude mesh of the
/// axis-aligned ellipsoid, with the sign taken from the implicit function.
fn mesh_signed_distance(axes: Vector3<f64>, p: Vector3<f64>, n: usize) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..n {
        let theta = std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
        let (st, ct) = theta.sin_cos();
        for j in 0..n {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
            let q = Vector3::new(axes[0] * st * phi.cos(), axes[1] * st * phi.sin(), axes[2] * ct);
            best = best.min((q - p).norm_squared());
        }
    }
    let level = (p.component_div(&axes)).norm_squared();
    best.sqrt() * if level <= 1.0 { 1.0 } else { -1.0 }
}

#[test]
fn signed_distance_matches_dense_mesh() {
    let axes = Vector3::new(12.0, 12.0, 10.0);
    let phantom = phantom_with_axes([12.0, 12.0, 10.0]);
    let p = Vector3::new(0.0, 0.0, -10.5);
    let exact = phantom.surface_signed_distance(&p);
    let mesh = mesh_signed_distance(axes, p, 1000);
    assert!(exact < 0.0);
    assert!((exact - mesh).abs() < 1e-3, "{exact} vs {mesh}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..-0.2))
            .normalize();
        let p = dir * rng.random_range(8.0..13.0);
        let exact = phantom.surface_signed_distance(&p);
        let mesh = mesh_signed_distance(axes, p, 600);
        assert!((exact - mesh).abs() < 5e-3, "{p:?}: {exact} vs {mesh}");
    }
}

#[test]
fn oracle_noise_matches_table() {
    let phantom = PhantomConfig::default().phantom().unwrap();
    let cam = CameraModel::default();
    let cfg = OracleConfig {
        sigma_table: vec![
            SigmaBreakpoint { distance_mm: 0.0, sigma_mm: [0.05; 3] },
            SigmaBreakpoint { distance_mm: 10.0, sigma_mm: [0.15; 3] },
        ],
        ..OracleConfig::default()
    };
    let mut oracle = DepthOracle::new(cfg).unwrap();
    let goal_px = cam.center_px();
    let tip = Vector3::new(0.0, 0.0, -2.0);
    let n = 100_000;
    let mut sum = Vector3::zeros();
    let mut sq = Vector3::zeros();
    for _ in 0..n {
        let d = oracle.predict(&tip, &goal_px, &phantom, &cam).unwrap();
        let e = d - Vector3::new(0.0, 0.0, -10.0);
        sum += e;
        sq += e.component_mul(&e);
    }
    for axis in 0..3 {
        let mean = sum[axis] / n as f64;
        let std = (sq[axis] / n as f64 - mean * mean).sqrt();
        assert!((std / 0.15 - 1.0).abs() < 0.02, "axis {axis}: std {std}");
    }
}

#[test]
fn noiseless_oracle_outputs_are_quantized() {
    let phantom = PhantomConfig::default().phantom().unwrap();
    let cam = CameraModel::default();
    let mut oracle = DepthOracle::new(OracleConfig::noiseless()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let tip = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-11.0..-4.0));
        let px = Vector2::new(rng.random_range(100.0..540.0), rng.random_range(80.0..400.0));
        let d = oracle.predict(&tip, &px, &phantom, &cam).unwrap();
        for v in d.iter() {
            let bins = v / 0.02;
            assert!((bins - bins.round()).abs() < 1e-9, "{v}");
        }
    }
}

/// Integer shift maximizing the normalized cross-correlation of two
/// same-sized images over a central window.
fn correlation_peak(a: &retina_nav::image::GrayImage, b: &retina_nav::image::GrayImage, r: isize) -> (isize, isize) {
    let (w, h) = (a.width() as isize, a.height() as isize);
    let (x0, y0, x1, y1) = (r + 40, r + 40, w - r - 40, h - r - 40);
    let mut best = (f64::NEG_INFINITY, (0, 0));
    for dy in -r..=r {
        for dx in -r..=r {
            let (mut sab, mut saa, mut sbb, mut sa, mut sb, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    let va = a.get(x as usize, y as usize) as f64;
                    let vb = b.get((x + dx) as usize, (y + dy) as usize) as f64;
                    sab += va * vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sa += va;
                    sb += vb;
                    n += 1.0;
                }
            }
            let cov = sab - sa * sb / n;
            let ncc = cov / ((saa - sa * sa / n) * (sbb - sb * sb / n)).sqrt();
            if ncc > best.0 {
                best = (ncc, (dx, dy));
            }
        }
    }
    best.1
}

#[test]
fn drift_translates_rendered_texture() {
    let cfg = PhantomConfig::default();
    let mut phantom = cfg.phantom().unwrap();
    let cam = cfg.camera;
    // Tool parked outside the field of view so only the fundus is imaged.
    let tool = ToolState::through_pivot(Vector3::new(7.6, 0.0, -6.0), phantom.incision_point);
    let before = render_topdown(&phantom, &tool, &cam, 0.0);
    phantom.apply_drift(Vector2::new(0.22, 0.0)).unwrap();
    let after = render_topdown(&phantom, &tool, &cam, 0.0);
    assert_eq!(correlation_peak(&before.image, &after.image, 14), (10, 0));
}

#[test]
fn render_centers_tip_marker() {
    let cfg = PhantomConfig::default();
    let phantom = cfg.phantom().unwrap();
    let tool = ToolState::through_pivot(Vector3::new(0.0, 0.0, -8.0), phantom.incision_point);
    let frame = render_topdown(&phantom, &tool, &cfg.camera, 1.5);
    assert!((frame.ground_truth_tip_px - cfg.camera.center_px()).norm() <= 1.0);
    assert_eq!(frame.image.width(), cfg.camera.width_px);
    assert_eq!(frame.image.height(), cfg.camera.height_px);
    let again = render_topdown(&phantom, &tool, &cfg.camera, 1.5);
    assert_eq!(frame.image, again.image);
}

#[test]
fn force_is_invariant_along_shaft() {
    let phantom = PhantomConfig::default().phantom().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let tip = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-10.0..-6.0));
        let offset = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0);
        let tool = ToolState::through_pivot(tip, phantom.incision_point + offset);
        let slid = ToolState {
            p: tool.p + tool.shaft_axis() * rng.random_range(-3.0..3.0),
            ..tool
        };
        let f0 = scleral_force(&tool, &phantom, 100.0).norm();
        let f1 = scleral_force(&slid, &phantom, 100.0).norm();
        assert!((f0 - f1).abs() < 1e-9 * f0.max(1.0));
    }
}

/// Dense 1 µm sampling of a polyline.
fn dense_contact(points: &[Vector3<f64>], phantom: &EyePhantom) -> bool {
    points.windows(2).any(|w| {
        let n = ((w[1] - w[0]).norm() / 1e-3).ceil().max(1.0) as usize;
        (0..=n).any(|k| {
            let p = w[0] + (w[1] - w[0]) * (k as f64 / n as f64);
            phantom.surface_signed_distance(&p) < TOOL_TIP_RADIUS
        })
    })
}

#[test]
fn collision_check_matches_dense_sampling() {
    let phantom = PhantomConfig::default().phantom().unwrap();
    let above = Vector3::new(0.0, 0.0, -11.0);
    let below = Vector3::new(0.0, 0.0, -12.02);
    assert!(collision_check(&[above, below], &phantom));
    assert!(dense_contact(&[above, below], &phantom));

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut hits = 0;
    for _ in 0..300 {
        let a = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-11.98..-11.7));
        let b = a + Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.1));
        let dense = dense_contact(&[a, b], &phantom);
        hits += dense as usize;
        assert_eq!(collision_check(&[a, b], &phantom), dense, "{a:?} -> {b:?}");
    }
    assert!(hits > 20 && hits < 280, "{hits}");
}

#[test]
fn rotated_phantom_is_proper() {
    let cfg = PhantomConfig {
        rotation_axis_angle: [0.1, -0.2, 0.3],
        retina_semi_axes: [12.0, 11.0, 10.0],
        ..PhantomConfig::default()
    };
    let p = cfg.phantom().unwrap();
    assert!((p.retina_rotation.transpose() * p.retina_rotation - Matrix3::identity()).norm() < 1e-10);
    assert!(p.sclera_signed_distance(&p.incision_point).abs() < 1e-6);
}
