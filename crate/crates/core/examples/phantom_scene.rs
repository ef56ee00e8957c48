//! Builds the default eye phantom, probes its geometry and depth oracle,
//! and renders one top-down microscope frame.
//!
//! Usage: `cargo run --release --example phantom_scene [frame.pgm]`

use nalgebra::Vector3;
use retina_nav::phantom::{render_topdown, scleral_force};
use retina_nav::{DepthOracle, PhantomConfig, ToolState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PhantomConfig::default();
    let phantom = cfg.phantom()?;
    let cam = cfg.camera;

    let goal_px = cam.center_px();
    let goal = phantom.goal_point(&goal_px, &cam)?;
    println!("goal under image center: {:.3?} mm", goal.as_slice());
    println!("incision point: {:.3?} mm", phantom.incision_point.as_slice());

    for h in [4.0, 1.0, 0.1, -0.05] {
        let p = goal + Vector3::new(0.0, 0.0, h);
        println!("  {h:>5.2} mm above goal: signed distance to retina {:+.4} mm", phantom.surface_signed_distance(&p));
    }

    let tip = goal + Vector3::new(0.0, 0.0, 3.0);
    let tool = ToolState::through_pivot(tip, phantom.incision_point);
    let mut oracle = DepthOracle::new(cfg.oracle.clone())?;
    println!("true tip-to-goal vector {:.3?}", (goal - tip).as_slice());
    for _ in 0..3 {
        let d = oracle.predict(&tip, &goal_px, &phantom, &cam)?;
        println!("  oracle prediction {:.3?}", d.as_slice());
    }

    let mut leaning = tool;
    leaning.p += Vector3::new(0.1, 0.0, 0.0);
    let f = scleral_force(&leaning, &phantom, cfg.k_s);
    println!("shaft shifted 0.1 mm off the incision: force {:.2} mN", f.norm());

    let frame = render_topdown(&phantom, &tool, &cam, 0.0);
    println!(
        "rendered {}x{} frame, tip marker at {:.1?} px",
        frame.image.width(),
        frame.image.height(),
        frame.ground_truth_tip_px.as_slice()
    );
    if let Some(path) = std::env::args().nth(1) {
        frame.image.save_pgm(&path)?;
        println!("saved {path}");
    }
    Ok(())
}
