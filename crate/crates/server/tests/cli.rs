use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_retina-nav"))
}

#[test]
fn run_then_replay_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, "name = \"cli-small\"\nmode = \"mpc\"\nstop_preset = \"300um\"\nn_goals = 2\n").unwrap();
    let out = dir.path().join("out");

    let run = bin().args(["run", "--spec"]).arg(&spec).arg("--out").arg(&out).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.contains("| cli-small | 2 |"), "{stdout}");

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let replay = bin().args(["replay", "--log"]).arg(out.join("cli-small")).output().unwrap();
    assert!(replay.status.success());
    let recomputed: serde_json::Value = serde_json::from_slice(&replay.stdout).unwrap();
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(recomputed["hits"].as_u64().unwrap().to_string(), row[3]);
    assert_eq!(recomputed["mean_time_s"].as_f64().unwrap(), row[2].parse::<f64>().unwrap());

    let log = bin().args(["replay", "--log"]).arg(out.join("cli-small").join("trial_000.jsonl")).output().unwrap();
    let text = String::from_utf8(log.stdout).unwrap();
    assert!(text.lines().next().unwrap().starts_with("cycle   1"), "{text}");
}

#[test]
fn missing_spec_fails_cleanly() {
    let out = bin().args(["run", "--spec", "/nonexistent/spec.toml"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
