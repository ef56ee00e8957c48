use retina_nav::harness::{
    experiment_dir, export_results, read_metrics_csv, read_trial_log, recompute_metrics_from_logs, render_table,
    run_experiment, run_force_campaign, table_bundle, write_metrics_csv, ExperimentMode, ExperimentSpec, HarnessError,
    LogRecord, MetricsRow, StopPreset, METRICS_FILE,
};
use retina_nav::PhantomConfig;

fn small(mode: ExperimentMode, preset: StopPreset, n: usize) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new("small", mode, preset);
    spec.n_goals = n;
    spec
}

#[test]
fn empty_metrics_file_has_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics_csv(&[], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.trim(), "mean_x_err_mm,mean_y_err_mm,mean_time_s,hits,mean_force_mN,max_force_mN");
    assert!(read_metrics_csv(&path).unwrap().is_empty());
}

#[test]
fn metrics_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let rows = vec![
        MetricsRow {
            mean_x_err_mm: 0.1 + 0.2,
            mean_y_err_mm: 1.0 / 3.0,
            mean_time_s: 7.123_456_789_012_345,
            hits: 3,
            mean_force_mn: 11.97,
            max_force_mn: f64::MIN_POSITIVE,
        },
        MetricsRow {
            mean_x_err_mm: 0.0,
            mean_y_err_mm: 0.0,
            mean_time_s: 0.0,
            hits: 0,
            mean_force_mn: 0.0,
            max_force_mn: 0.0,
        },
    ];
    write_metrics_csv(&rows, &path).unwrap();
    assert_eq!(read_metrics_csv(&path).unwrap(), rows);
}

#[test]
fn exported_logs_reproduce_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut specs = [small(ExperimentMode::Mpc, StopPreset::Um300, 3), small(ExperimentMode::HeadDrift, StopPreset::Um100, 2)];
    specs[1].name = "drift".into();
    let outcomes: Vec<_> = specs.iter().map(|s| run_experiment(s).unwrap()).collect();
    let files = export_results(&outcomes, dir.path()).unwrap();
    assert!(files.iter().all(|f| f.exists()));

    let rows = read_metrics_csv(&dir.path().join(METRICS_FILE)).unwrap();
    for (o, row) in outcomes.iter().zip(&rows) {
        assert_eq!(&o.metrics, row);
        assert_eq!(recompute_metrics_from_logs(&experiment_dir(dir.path(), &o.name)).unwrap(), o.metrics);
    }

    let log = read_trial_log(&experiment_dir(dir.path(), "drift").join("trial_000.jsonl")).unwrap();
    let cycles = log.iter().filter(|r| matches!(r, LogRecord::Cycle(_))).count();
    assert_eq!(cycles, outcomes[1].trials[0].result.as_ref().unwrap().cycles);
    assert!(matches!(log.last(), Some(LogRecord::Summary(_))));
}

#[test]
fn experiments_are_deterministic() {
    let spec = small(ExperimentMode::Mpc, StopPreset::Um100, 2);
    let a = run_experiment(&spec).unwrap();
    let b = run_experiment(&spec).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.summaries(), b.summaries());
}

#[test]
fn table_has_five_rows() {
    let outcomes: Vec<_> = table_bundle(1)
        .into_iter()
        .map(|mut s| {
            s.n_goals = 1;
            run_experiment(&s).unwrap()
        })
        .collect();
    let table = render_table(&outcomes);
    let body: Vec<&str> = table.lines().filter(|l| l.starts_with('|')).skip(2).collect();
    assert_eq!(body.len(), 5, "{table}");
}

#[test]
fn goals_are_inside_the_region_and_reproducible() {
    let spec = ExperimentSpec::default();
    let cam = spec.phantom.camera;
    let goals = spec.goals(&cam);
    assert_eq!(goals.len(), 20);
    assert_eq!(goals, spec.goals(&cam));
    let c = cam.center_px();
    for g in &goals {
        assert!((g[0] - c[0]).abs() <= 30.0 && (g[1] - c[1]).abs() <= 40.0, "{g:?}");
    }
    let mut other = spec.clone();
    other.seed = 2;
    assert_ne!(goals, other.goals(&cam));
}

#[test]
fn drift_schedules_follow_mode() {
    let spec = ExperimentSpec::new("d", ExperimentMode::HeadDrift, StopPreset::Um100);
    for t in 0..20 {
        let s = spec.drift_schedule(t);
        assert_eq!(s.len(), 1);
        assert!((15..=45).contains(&s[0].frame));
        assert!(s[0].delta_mm.iter().all(|d| d.abs() <= 0.25));
    }
    let force = ExperimentSpec::new("f", ExperimentMode::ForceDrift, StopPreset::Um100);
    for t in 0..10 {
        let s = force.drift_schedule(t);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].delta_mm, s[1].delta_mm);
        assert_eq!(s[1].frame, s[0].frame + 50);
        assert!(s[0].delta_mm.iter().all(|d| 2.0 * d.abs() <= 0.5));
    }
    assert!(ExperimentSpec::default().drift_schedule(0).is_empty());
}

#[test]
fn force_campaign_requires_force_mode() {
    assert!(matches!(run_force_campaign(&ExperimentSpec::default()), Err(HarnessError::Invalid(_))));
    let c = run_force_campaign(&small(ExperimentMode::ForceMpc, StopPreset::Um100, 2)).unwrap();
    assert_eq!(c.summary.n_trials, 2);
    assert!(c.summary.mean_force_mn > 0.0 && c.summary.max_force_mn >= c.summary.mean_force_mn);
}

#[test]
fn toml_spec_with_separate_phantom_file() {
    let dir = tempfile::tempdir().unwrap();
    let phantom = PhantomConfig {
        retina_semi_axes: [11.5, 12.0, 12.5],
        k_s: 42.0,
        ..Default::default()
    };
    std::fs::write(dir.path().join("eye.toml"), toml::to_string(&phantom).unwrap()).unwrap();
    let spec_text = "name = \"custom\"\nmode = \"head_drift\"\nstop_preset = \"300um\"\nn_goals = 4\nseed = 9\nphantom_file = \"eye.toml\"\n";
    let path = dir.path().join("spec.toml");
    std::fs::write(&path, spec_text).unwrap();
    let spec = ExperimentSpec::load(&path).unwrap();
    assert_eq!(spec.mode, ExperimentMode::HeadDrift);
    assert_eq!(spec.stop_preset, StopPreset::Um300);
    assert_eq!(spec.n_goals, 4);
    assert_eq!(spec.phantom, phantom);
    assert_eq!(spec.nav_config().stop_norm_mm, StopPreset::Um300.nav_config().stop_norm_mm);

    let mut inline = spec.clone();
    inline.phantom_file = None;
    let again = ExperimentSpec::from_toml_str(&inline.to_toml_string().unwrap(), None).unwrap();
    assert_eq!(again, inline);
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(ExperimentSpec::from_toml_str("n_goals = 0\n", None).is_err());
    assert!(ExperimentSpec::from_toml_str("mode = \"sideways\"\n", None).is_err());
}

#[test]
fn excessive_aborts_are_reported() {
    let mut spec = small(ExperimentMode::Mpc, StopPreset::Um100, 2);
    spec.nav.max_cycles = 1;
    assert!(matches!(run_experiment(&spec), Err(HarnessError::TooManyAborts { .. })));
}
