//! Chance-constraint margin along a vertical approach to the goal, for the
//! joint and block-diagonal covariance models.
//!
//! Usage: `cargo run --release --example chance_margin [alpha]`

use nalgebra::Vector3;
use retina_nav::chance::{kappa, margin_at, CovarianceStructure};
use retina_nav::geometry::{estimate_covariance, RegularizationPrior, SamplingConfig};
use retina_nav::{DepthOracle, PhantomConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let alpha: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0.99);
    let cfg = PhantomConfig::default();
    let phantom = cfg.phantom()?;
    let cam = cfg.camera;
    let goal_px = cam.center_px();
    let goal = phantom.goal_point(&goal_px, &cam)?;
    let prior = RegularizationPrior {
        center0: Vector3::zeros(),
        radius0: 12.0,
        lambda: 1.0,
    };
    let mut oracle = DepthOracle::new(cfg.oracle.clone())?;
    let tip = goal + Vector3::new(0.0, 0.0, 1.0);
    let est = estimate_covariance(&goal_px, &prior, &SamplingConfig::default(), &tip, &phantom, &cam, &mut oracle)?;

    println!("alpha {alpha}, kappa {:.4}", kappa(alpha)?);
    println!("{:>10} {:>12} {:>12} {:>12}", "height mm", "true clr mm", "g joint", "g block");
    for h in [1.0, 0.5, 0.2, 0.1, 0.05, 0.0] {
        let p = goal + Vector3::new(0.0, 0.0, h);
        let joint = margin_at(&p, &est, alpha, CovarianceStructure::Joint)?;
        let block = margin_at(&p, &est, alpha, CovarianceStructure::BlockDiagonal)?;
        println!(
            "{h:>10.2} {:>12.4} {:>12.5} {:>12.5}",
            phantom.surface_signed_distance(&p),
            joint.g,
            block.g
        );
    }
    Ok(())
}
