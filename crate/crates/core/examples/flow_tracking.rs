//! Shi-Tomasi corners and pyramidal Lucas-Kanade flow between two frames
//! separated by a rigid eye drift.
//!
//! Usage: `cargo run --release --example flow_tracking [dx_mm] [dy_mm] [overlay.pgm]`

use nalgebra::{Vector2, Vector3};
use retina_nav::flow::{debug_overlay, track_frames, CornerParams, CropSpec, LkParams};
use retina_nav::phantom::render_topdown;
use retina_nav::{PhantomConfig, ToolState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dx: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.3);
    let dy: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(-0.2);
    let overlay = args.next();

    let cfg = PhantomConfig {
        drift_range_mm: 0.5,
        ..Default::default()
    };
    let mut phantom = cfg.phantom()?;
    let cam = cfg.camera;
    let goal = phantom.goal_point(&cam.center_px(), &cam)?;
    let tool = ToolState::through_pivot(goal + Vector3::new(0.0, 0.0, 1.0), phantom.incision_point);

    let before = render_topdown(&phantom, &tool, &cam, 0.0).image;
    phantom.apply_drift(Vector2::new(dx, dy))?;
    let after = render_topdown(&phantom, &tool, &cam, 0.0).image;

    let crop = CropSpec::default();
    let t = std::time::Instant::now();
    let r = track_frames(&before, &after, &crop, &CornerParams::default(), &LkParams::default())?;
    let expected = Vector2::new(dx, dy) / cam.mm_per_px;
    println!(
        "{} features, {} inliers, shift [{:.3}, {:.3}] px (true [{:.3}, {:.3}]) in {:.1?}",
        r.matches.len(),
        r.inlier_count,
        r.global_shift[0],
        r.global_shift[1],
        expected[0],
        expected[1],
        t.elapsed()
    );
    if let Some(path) = overlay {
        debug_overlay(&crop.apply(&before), &r, 3.0).save_pgm(&path)?;
        println!("saved {path}");
    }
    Ok(())
}
