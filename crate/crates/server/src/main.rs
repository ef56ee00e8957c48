use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use retina_nav::harness::{
    calibrate_k_s, export_results, read_trial_log, recompute_metrics_from_logs, render_table, run_experiment,
    run_force_campaign, table_bundle, ExperimentMode, ExperimentSpec, LogRecord, StopPreset,
};
use retina_nav_server::{serve, ServerConfig};

#[derive(Parser)]
#[command(name = "retina-nav", version, about = "Autonomous retinal needle navigation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment, or the five-row results table when no spec is given.
    Run {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Serve the live simulation over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Experiment spec whose phantom and navigation settings are used.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Playback speed relative to the camera frame rate; 0 runs unpaced.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
    /// Calibrate the scleral spring constant against the MPC force campaign.
    CalibrateForce {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a trial log, or recompute metrics for an experiment directory.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
}

fn load_spec(path: Option<&PathBuf>, seed: Option<u64>, default: ExperimentSpec) -> Result<ExperimentSpec, Box<dyn std::error::Error>> {
    let mut spec = match path {
        Some(p) => ExperimentSpec::load(p)?,
        None => default,
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run { spec, seed, out } => {
            let specs = match spec {
                Some(p) => vec![load_spec(Some(&p), seed, ExperimentSpec::default())?],
                None => table_bundle(seed.unwrap_or(1)),
            };
            let mut outcomes = Vec::new();
            for s in &specs {
                let outcome = if s.mode.is_force() {
                    let c = run_force_campaign(s)?;
                    println!(
                        "{}: mean force {:.2} mN, max {:.2} mN, {} samples over limit",
                        s.name, c.summary.mean_force_mn, c.summary.max_force_mn, c.summary.samples_over_limit
                    );
                    c.outcome
                } else {
                    run_experiment(s)?
                };
                outcomes.push(outcome);
            }
            print!("{}", render_table(&outcomes));
            let files = export_results(&outcomes, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Serve { bind, spec, speed } => {
            let mut config = ServerConfig::default();
            if let Some(p) = spec {
                let s = ExperimentSpec::load(p)?;
                config.phantom = s.phantom;
                config.nav = s.nav;
            }
            config.frame_interval = if speed > 0.0 {
                Duration::from_secs_f64(config.nav.dt / speed)
            } else {
                Duration::ZERO
            };
            println!("serving on http://{bind}");
            tokio::runtime::Runtime::new()?.block_on(serve(bind, config))?;
        }
        Command::CalibrateForce { spec, seed } => {
            let default = ExperimentSpec::new("force-mpc", ExperimentMode::ForceMpc, StopPreset::Um100);
            let s = load_spec(spec.as_ref(), seed, default)?;
            let k_s = calibrate_k_s(&s)?;
            println!("k_s = {k_s:.4} mN/mm");
        }
        Command::Replay { log } => {
            if log.is_dir() {
                let m = recompute_metrics_from_logs(&log)?;
                println!("{}", serde_json::to_string_pretty(&m)?);
            } else {
                for record in read_trial_log(&log)? {
                    match record {
                        LogRecord::Cycle(c) => println!(
                            "cycle {:>3}  t {:>7.3} s  tip [{:8.4} {:8.4} {:8.4}]  |d| {:.4} mm  g {}  force {:.2} mN",
                            c.cycle,
                            c.t_virtual,
                            c.tool.p[0],
                            c.tool.p[1],
                            c.tool.p[2],
                            c.prediction.norm(),
                            c.margin_g.map_or("-".into(), |g| format!("{g:.4}")),
                            c.force_mn
                        ),
                        LogRecord::Summary(s) => println!("{}", serde_json::to_string_pretty(&s)?),
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
