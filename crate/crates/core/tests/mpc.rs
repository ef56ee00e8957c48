use nalgebra::Vector2;
use retina_nav::mpc::{navigate, navigate_direct, DriftEvent, NavConfig, NavResult, Navigator, StepStatus, World};
use retina_nav::{OracleConfig, PhantomConfig};

fn world(seed: u64, noiseless: bool) -> World {
    let mut cfg = PhantomConfig::default();
    if noiseless {
        cfg.oracle = OracleConfig::noiseless();
    }
    World::from_config(&cfg, seed).unwrap()
}

fn goal(w: &World, offset: (f64, f64)) -> Vector2<f64> {
    w.camera.center_px() + Vector2::new(offset.0, offset.1)
}

fn xy_error(r: &NavResult) -> f64 {
    r.final_xy_error_mm[0].abs().max(r.final_xy_error_mm[1].abs())
}

#[test]
fn noiseless_navigation_reaches_goal() {
    let w = world(0, true);
    let g = goal(&w, (0.0, 0.0));
    let r = navigate(w, &NavConfig::preset_100um(), g, None, &[]).unwrap();
    assert!(r.reached && !r.hit_retina, "{:?}", r.aborted);
    assert!(xy_error(&r) < 0.02, "{:?}", r.final_xy_error_mm);
    assert!(r.final_prediction.norm() < 0.1);
    assert!(r.min_clearance_mm > 0.0);
}

#[test]
fn noisy_suite_is_safe_and_accurate() {
    for (i, offset) in [(-30.0, -40.0), (25.0, 10.0), (0.0, 35.0), (-15.0, 20.0)].into_iter().enumerate() {
        for cfg in [NavConfig::preset_100um(), NavConfig::preset_300um()] {
            let w = world(i as u64 + 1, false);
            let g = goal(&w, offset);
            let r = navigate(w, &cfg, g, None, &[]).unwrap();
            assert!(r.reached, "goal {offset:?}: {:?}", r.aborted);
            assert!(!r.hit_retina, "goal {offset:?}");
            assert!(xy_error(&r) <= 0.06, "goal {offset:?}: {:?}", r.final_xy_error_mm);
        }
    }
}

#[test]
fn cycle_log_is_consistent() {
    let w = world(3, false);
    let g = goal(&w, (10.0, -10.0));
    let cfg = NavConfig::preset_100um();
    let r = navigate(w, &cfg, g, None, &[]).unwrap();
    assert_eq!(r.cycles, r.cycle_log.len());
    for pair in r.cycle_log.windows(2) {
        assert!(pair[1].t_virtual > pair[0].t_virtual);
        assert!(pair[1].frame >= pair[0].frame);
    }
    assert!(r.cycle_log.iter().all(|c| c.margin_g.is_none_or(|m| m <= 1e-6)));
    assert!(r.final_prediction.norm() < cfg.stop_norm_mm);
    assert!(r.refits >= 1);
    assert!((r.elapsed_virtual_s - r.cycle_log.last().unwrap().t_virtual).abs() < 1.0);
}

#[test]
fn navigation_is_deterministic() {
    let run = || {
        let w = world(7, false);
        let g = goal(&w, (-20.0, 5.0));
        navigate(w, &NavConfig::preset_300um(), g, None, &[]).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.final_tip, b.final_tip);
    assert_eq!(a.elapsed_virtual_s, b.elapsed_virtual_s);
    assert_eq!(a.cycles, b.cycles);
}

#[test]
fn noiseless_baseline_is_safe_but_slower() {
    let w = world(0, true);
    let g = goal(&w, (15.0, -25.0));
    let base = navigate_direct(w.clone(), &NavConfig::preset_100um(), g, None).unwrap();
    assert!(base.reached && !base.hit_retina, "{:?}", base.aborted);
    let mpc = navigate(w, &NavConfig::preset_100um(), g, None, &[]).unwrap();
    assert!(base.elapsed_virtual_s > mpc.elapsed_virtual_s, "{} vs {}", base.elapsed_virtual_s, mpc.elapsed_virtual_s);
}

#[test]
fn drift_is_compensated() {
    let mut w = world(4, false);
    w.phantom.drift_range = 0.25;
    let g = goal(&w, (-10.0, 20.0));
    let drifts = [DriftEvent {
        frame: 20,
        delta_mm: [0.18, -0.12],
    }];
    let r = navigate(w, &NavConfig::preset_100um(), g, None, &drifts).unwrap();
    assert!(r.reached && !r.hit_retina, "{:?}", r.aborted);
    assert_eq!(r.reregistration_errors_px.len(), 1);
    assert!(r.reregistration_errors_px[0] <= 0.5, "{:?}", r.reregistration_errors_px);
    assert!(xy_error(&r) <= 0.06, "{:?}", r.final_xy_error_mm);
}

#[test]
fn stepping_api_controls() {
    let w = world(5, false);
    let g = goal(&w, (0.0, 0.0));
    let start = w.start_pose(4.0).unwrap();
    let mut nav = Navigator::new(w, NavConfig::default(), g, start).unwrap();
    assert!(nav.set_goal(Vector2::new(-50.0, -50.0)).is_err());
    assert!(nav.inject_drift(Vector2::new(1.0, 0.0)).is_err());
    for _ in 0..5 {
        nav.step().unwrap();
    }
    assert!(nav.snapshot().frame >= 5);
    nav.stop();
    assert!(nav.is_done());
    assert_eq!(nav.step().unwrap(), StepStatus::Done);
    let r = nav.finish();
    assert!(!r.reached);
}

#[test]
fn invalid_config_is_rejected() {
    let w = world(0, false);
    let g = goal(&w, (0.0, 0.0));
    let cfg = NavConfig {
        dt: -1.0,
        ..Default::default()
    };
    assert!(navigate(w, &cfg, g, None, &[]).is_err());
}
