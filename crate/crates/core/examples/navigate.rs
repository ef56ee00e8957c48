//! Closed-loop navigation to one goal with the receding-horizon controller,
//! compared with the direct baseline on the same world.
//!
//! Usage: `cargo run --release --example navigate [100um|300um] [seed]`

use nalgebra::Vector2;
use retina_nav::mpc::{navigate, navigate_direct, NavConfig, NavResult, World};
use retina_nav::PhantomConfig;

fn report(label: &str, r: &NavResult) {
    println!(
        "{label:<9} reached {:<5} hit {:<5} time {:>6.2} s  cycles {:>3}  refits {:>2}  |X| {:.4} |Y| {:.4} mm  clearance {:+.4} mm",
        r.reached,
        r.hit_retina,
        r.elapsed_virtual_s,
        r.cycles,
        r.refits,
        r.final_xy_error_mm[0].abs(),
        r.final_xy_error_mm[1].abs(),
        r.final_clearance_mm
    );
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let cfg = match args.next().as_deref() {
        Some("300um") => NavConfig::preset_300um(),
        _ => NavConfig::preset_100um(),
    };
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let world = World::from_config(&PhantomConfig::default(), seed)?;
    let goal = world.camera.center_px() + Vector2::new(-20.0, 25.0);

    let mpc = navigate(world.clone(), &cfg, goal, None, &[])?;
    report("mpc", &mpc);
    for c in mpc.cycle_log.iter().step_by(5) {
        println!(
            "  cycle {:>3} t {:>6.2} s  predicted distance {:.3} mm  margin {}",
            c.cycle,
            c.t_virtual,
            c.prediction.norm(),
            c.margin_g.map_or("-".to_string(), |g| format!("{g:+.4}"))
        );
    }
    let direct = navigate_direct(world, &cfg, goal, None)?;
    report("baseline", &direct);
    Ok(())
}
