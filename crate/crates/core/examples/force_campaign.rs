//! Scleral-force campaigns: stiffness calibration, MPC without and with
//! head drift, and the ablation with remote-center updates disabled.
//!
//! Usage: `cargo run --release --example force_campaign [seed]`

use retina_nav::harness::{calibrate_k_s, run_force_campaign, ExperimentMode, ExperimentSpec, StopPreset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);

    let mut mpc = ExperimentSpec::new("force-mpc", ExperimentMode::ForceMpc, StopPreset::Um100);
    mpc.seed = seed;
    let k_s = calibrate_k_s(&mpc)?;
    println!("calibrated k_s = {k_s:.2} mN/mm (configured {:.2})", mpc.phantom.k_s);

    let mut drift = ExperimentSpec::new("force-drift", ExperimentMode::ForceDrift, StopPreset::Um100);
    drift.seed = seed;
    let mut ablation = drift.clone();
    ablation.name = "force-drift-no-rcm-update".into();
    ablation.nav.update_rcm = false;

    for spec in [&mpc, &drift, &ablation] {
        let c = run_force_campaign(spec)?;
        let s = c.summary;
        println!(
            "{:<28} trials {:>2}  mean {:>6.2} mN  max {:>6.2} mN  samples over limit {}",
            spec.name, s.n_trials, s.mean_force_mn, s.max_force_mn, s.samples_over_limit
        );
    }
    Ok(())
}
