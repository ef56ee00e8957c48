//! Frame-by-frame navigation with a head drift injected mid-run; the goal
//! pixel and the incision point are re-registered by optical flow.
//!
//! Usage: `cargo run --release --example head_drift [dx_mm] [dy_mm]`

use nalgebra::Vector2;
use retina_nav::mpc::{NavConfig, Navigator, World};
use retina_nav::PhantomConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dx: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.2);
    let dy: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(-0.15);

    let world = World::from_config(&PhantomConfig::default(), 3)?;
    let goal = world.camera.center_px() + Vector2::new(15.0, -10.0);
    let start = world.start_pose(4.0)?;
    let mut nav = Navigator::new(world, NavConfig::preset_100um(), goal, start)?;

    while !nav.is_done() {
        let s = nav.snapshot();
        if s.frame == 20 {
            nav.inject_drift(Vector2::new(dx, dy))?;
            println!("frame {:>3}: injected drift ({dx}, {dy}) mm", s.frame);
        }
        nav.step()?;
        let s = nav.snapshot();
        if s.frame % 15 == 0 {
            println!(
                "frame {:>3}  t {:>6.2} s  goal px [{:.2}, {:.2}]  force {:>6.2} mN",
                s.frame, s.t_virtual, s.goal_px[0], s.goal_px[1], s.force_mn
            );
        }
    }
    let r = nav.finish();
    println!(
        "reached {} in {:.2} s, re-registration error {:?} px, landing |X| {:.4} |Y| {:.4} mm, peak force {:.2} mN",
        r.reached,
        r.elapsed_virtual_s,
        r.reregistration_errors_px,
        r.final_xy_error_mm[0].abs(),
        r.final_xy_error_mm[1].abs(),
        r.max_force_mn
    );
    Ok(())
}
