//! One open-loop trajectory optimization: an unconstrained reach to a goal
//! just below the retina, then the same reach under the chance constraint.
//!
//! Usage: `cargo run --release --example ddp_reach`

use std::time::Instant;

use nalgebra::Vector3;
use retina_nav::chance::CovarianceStructure;
use retina_nav::ddp::{solve, ChanceSpec, OCProblem};
use retina_nav::geometry::{estimate_covariance, RegularizationPrior, SamplingConfig};
use retina_nav::{DepthOracle, PhantomConfig, ToolState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PhantomConfig::default();
    let phantom = cfg.phantom()?;
    let cam = cfg.camera;
    let goal_px = cam.center_px();
    let goal = phantom.goal_point(&goal_px, &cam)?;
    let tip = goal + Vector3::new(0.3, -0.2, 3.0);
    let x0 = ToolState::through_pivot(tip, phantom.incision_point);
    let mut prob = OCProblem::new(x0, goal + Vector3::new(0.0, 0.0, -0.1), phantom.incision_point);

    let t = Instant::now();
    let free = solve(&prob, None)?;
    let end = free.trajectory.states.last().unwrap().p;
    println!(
        "unconstrained: {} iterations in {:.1?}, end clearance {:+.4} mm, max shaft residual {:.2e} mm",
        free.report.iterations,
        t.elapsed(),
        phantom.surface_signed_distance(&end),
        free.report.max_scleral_residual
    );

    let mut oracle = DepthOracle::new(cfg.oracle.clone())?;
    let prior = RegularizationPrior {
        center0: Vector3::zeros(),
        radius0: 12.0,
        lambda: 1.0,
    };
    let est = estimate_covariance(&goal_px, &prior, &SamplingConfig::default(), &tip, &phantom, &cam, &mut oracle)?;
    prob.chance = Some(ChanceSpec {
        estimate: est.inset(0.05)?,
        alpha: 0.99,
        structure: CovarianceStructure::BlockDiagonal,
    });
    let t = Instant::now();
    let safe = solve(&prob, Some(&free.trajectory))?;
    let end = safe.trajectory.states.last().unwrap().p;
    println!(
        "chance-constrained: {} iterations in {:.1?}, end clearance {:+.4} mm, max margin {:.2e}",
        safe.report.iterations,
        t.elapsed(),
        phantom.surface_signed_distance(&end),
        safe.report.max_chance_margin
    );
    Ok(())
}
