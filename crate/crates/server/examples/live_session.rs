//! Drives the live simulation service in-process: pick a goal, start an MPC
//! run, inject a head drift mid-run and follow the published state stream.
//!
//! Usage: `cargo run --release -p retina-nav-server --example live_session`

use std::time::Duration;

use retina_nav::harness::{ExperimentMode, StopPreset};
use retina_nav_server::{AppState, RunRequest, RunStatus, ServerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let config = ServerConfig {
            frame_interval: Duration::ZERO,
            ..ServerConfig::default()
        };
        let app = AppState::spawn(config)?;
        let s = app.state();
        let goal = app.set_goal(s.goal_px[0] + 20.0, s.goal_px[1] - 15.0).await?;
        println!("goal set to {:?} px", goal.goal_px);
        if let Err(e) = app.set_goal(-10.0, 5.0).await {
            println!("rejected goal: {} ({})", e.error, e.status);
        }

        let mut events = app.subscribe();
        app.start_run(RunRequest {
            mode: ExperimentMode::Mpc,
            preset: StopPreset::Um100,
        })
        .await?;
        let mut drifted = false;
        let mut last_printed = usize::MAX;
        loop {
            let s = events.recv().await?;
            if !drifted && s.frame >= 20 {
                let after = app.drift(0.15, 0.1).await?;
                println!("frame {:>3}: drift injected, goal still at {:?} px until re-registration", after.frame, after.goal_px);
                drifted = true;
            }
            if s.frame % 20 == 0 && s.frame != last_printed && s.status == RunStatus::Running {
                last_printed = s.frame;
                println!(
                    "frame {:>3}  t {:>6.2} s  goal px [{:.2}, {:.2}]  distance {}  force {:.2} mN",
                    s.frame,
                    s.t_virtual,
                    s.goal_px[0],
                    s.goal_px[1],
                    s.predicted_distance_mm.map_or("-".into(), |d| format!("{d:.3} mm")),
                    s.force_mn
                );
            }
            if s.status != RunStatus::Running && s.run_id > 0 {
                println!("run finished: {:?} at t {:.2} s, hit {}, reason {:?}", s.status, s.t_virtual, s.hit_retina, s.reason);
                break;
            }
        }
        println!("latest frame PNG: {} bytes", app.frame_png().len());
        Ok::<_, Box<dyn std::error::Error>>(())
    })
}
