//! Runs the five intact-eye experiments and prints the results table.
//!
//! Usage: `cargo run --release --example table_one [seed] [out_dir]`

use std::path::PathBuf;
use std::time::Instant;

use retina_nav::harness::{export_results, render_table, run_experiment, table_bundle};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let out = args.next().map(PathBuf::from);

    let mut outcomes = Vec::new();
    for spec in table_bundle(seed) {
        let t0 = Instant::now();
        let o = run_experiment(&spec)?;
        let reached = o.results().filter(|r| r.reached).count();
        eprintln!("{}: {reached}/{} reached in {:.1?}", spec.name, o.trials.len(), t0.elapsed());
        outcomes.push(o);
    }
    print!("{}", render_table(&outcomes));
    if let Some(dir) = out {
        let files = export_results(&outcomes, &dir)?;
        eprintln!("wrote {} files under {}", files.len(), dir.display());
    }
    Ok(())
}
