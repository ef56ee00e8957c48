//! Samples the retina with the depth oracle around a goal and fits the
//! regularized ellipsoid, with its Monte-Carlo covariance.
//!
//! Usage: `cargo run --release --example fit_geometry [prior_lambda]`

use nalgebra::Vector3;
use retina_nav::geometry::{estimate_covariance, RegularizationPrior, SamplingConfig};
use retina_nav::{DepthOracle, PhantomConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let lambda: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1.0);
    let cfg = PhantomConfig::default();
    let phantom = cfg.phantom()?;
    let cam = cfg.camera;
    let goal_px = cam.center_px();
    let goal = phantom.goal_point(&goal_px, &cam)?;
    let prior = RegularizationPrior {
        center0: Vector3::from(cfg.retina_center),
        radius0: 12.0,
        lambda,
    };
    let mut oracle = DepthOracle::new(cfg.oracle.clone())?;

    println!("true center {:?}, semi-axes {:?}", cfg.retina_center, cfg.retina_semi_axes);
    for h in [3.0, 1.0, 0.3] {
        let tip = goal + Vector3::new(0.0, 0.0, h);
        let est = estimate_covariance(&goal_px, &prior, &SamplingConfig::default(), &tip, &phantom, &cam, &mut oracle)?;
        println!(
            "tip {h} mm above goal: center {:.3?}, semi-axes {:.3?}, center std {:.4} mm, goal level {:.5}",
            est.p_c.as_slice(),
            est.semi_axes().as_slice(),
            est.cov_center.trace().sqrt(),
            est.level(&goal)
        );
    }
    Ok(())
}
