//! Experiment orchestration: goal suites, batch runs, force campaigns,
//! metrics tables and run logs.
//!
//! Every trial is an independent, seeded simulation, so a spec and a seed
//! determine the results bit for bit. Metrics are computed from the
//! per-trial summaries that are also written to the run logs, which makes
//! [`recompute_metrics_from_logs`] reproduce [`ExperimentOutcome::metrics`]
//! exactly.

use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpc::{navigate, navigate_direct, CycleRecord, DriftEvent, NavConfig, NavError, NavResult, World};
use crate::phantom::{CameraModel, PhantomConfig, SimError};

/// Mean scleral force of the MPC force campaign used to calibrate `k_s`, mN.
pub const FORCE_CALIBRATION_TARGET_MN: f64 = 11.97;
/// Safe scleral force limit, mN.
pub const FORCE_SAFE_LIMIT_MN: f64 = 115.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("config write error: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Nav(#[from] NavError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("{aborted} of {total} trials aborted")]
    TooManyAborts { aborted: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    Baseline,
    #[default]
    Mpc,
    HeadDrift,
    ForceMpc,
    ForceDrift,
}

impl ExperimentMode {
    pub fn is_force(self) -> bool {
        matches!(self, Self::ForceMpc | Self::ForceDrift)
    }

    pub fn has_drift(self) -> bool {
        matches!(self, Self::HeadDrift | Self::ForceDrift)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum StopPreset {
    #[default]
    #[serde(rename = "100um")]
    Um100,
    #[serde(rename = "300um")]
    Um300,
}

impl StopPreset {
    pub fn nav_config(self) -> NavConfig {
        match self {
            Self::Um100 => NavConfig::preset_100um(),
            Self::Um300 => NavConfig::preset_300um(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Um100 => "100um",
            Self::Um300 => "300um",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub mode: ExperimentMode,
    pub stop_preset: StopPreset,
    pub n_goals: usize,
    /// Width and height of the goal region centered in the image, px.
    pub goal_region_px: [f64; 2],
    /// Per-axis drift bound, mm.
    pub drift_range_mm: f64,
    pub seed: u64,
    /// Phantom description loaded from a separate file, relative to the
    /// spec file. Overrides `phantom` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phantom_file: Option<PathBuf>,
    pub phantom: PhantomConfig,
    /// Navigation parameters; the stop fields are taken from `stop_preset`.
    pub nav: NavConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self::new("mpc-100um", ExperimentMode::Mpc, StopPreset::Um100)
    }
}

impl ExperimentSpec {
    pub fn new(name: &str, mode: ExperimentMode, stop_preset: StopPreset) -> Self {
        Self {
            name: name.to_string(),
            mode,
            stop_preset,
            n_goals: if mode.is_force() { 10 } else { 20 },
            goal_region_px: [60.0, 80.0],
            drift_range_mm: if mode == ExperimentMode::ForceDrift { 0.5 } else { 0.25 },
            seed: 1,
            phantom_file: None,
            phantom: PhantomConfig::default(),
            nav: stop_preset.nav_config(),
        }
    }

    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut spec: Self = toml::from_str(text)?;
        if let Some(rel) = &spec.phantom_file {
            let path = match base_dir {
                Some(dir) if rel.is_relative() => dir.join(rel),
                _ => rel.clone(),
            };
            spec.phantom = toml::from_str(&fs::read_to_string(path)?)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml_str(&fs::read_to_string(path)?, path.parent())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_goals == 0 {
            return Err(HarnessError::Invalid("n_goals must be at least 1".into()));
        }
        if self.goal_region_px.iter().any(|v| !(*v > 0.0)) {
            return Err(HarnessError::Invalid("goal region must have positive size".into()));
        }
        if !(self.drift_range_mm >= 0.0) {
            return Err(HarnessError::Invalid("drift range must be non-negative".into()));
        }
        self.nav_config().validate()?;
        self.phantom.phantom()?;
        self.phantom.oracle.validate()?;
        Ok(())
    }

    /// Navigation config with the preset's stop rule applied.
    pub fn nav_config(&self) -> NavConfig {
        let preset = self.stop_preset.nav_config();
        NavConfig {
            stop_mode: preset.stop_mode,
            stop_norm_mm: preset.stop_norm_mm,
            stop_px: preset.stop_px,
            ..self.nav.clone()
        }
    }

    /// Goal pixels of the suite. The force-drift campaign revisits the
    /// region center; every other mode places one jittered goal per cell of
    /// a grid laid over the goal region.
    pub fn goals(&self, cam: &CameraModel) -> Vec<Vector2<f64>> {
        let n = self.n_goals;
        if self.mode == ExperimentMode::ForceDrift {
            return vec![cam.center_px(); n];
        }
        let [w, h] = self.goal_region_px;
        let cols = ((n as f64 * w / h).sqrt().round() as usize).clamp(1, n);
        let rows = n.div_ceil(cols);
        let (cw, ch) = (w / cols as f64, h / rows as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0x60A1);
        let origin = cam.center_px() - Vector2::new(w, h) * 0.5;
        (0..n)
            .map(|k| {
                let (i, j) = ((k % cols) as f64, (k / cols) as f64);
                let jitter = Vector2::new(rng.random::<f64>(), rng.random::<f64>());
                origin + Vector2::new((i + jitter[0]) * cw, (j + jitter[1]) * ch)
            })
            .collect()
    }

    /// Eye-motion schedule of one trial.
    ///
    /// Offsets are Latin-hypercube samples over the suite: each axis of
    /// trial `k` falls in its own stratum of `[-range, range]`, so the suite
    /// covers the drift range evenly while every offset stays uniform.
    pub fn drift_schedule(&self, trial: usize) -> Vec<DriftEvent> {
        let n = self.n_goals.max(1);
        let strata = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(stream);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            perm
        };
        let (sx, sy) = (strata(0xD41F_A000), strata(0xD41F_B000));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0xD41F_0000 + trial as u64);
        let r = self.drift_range_mm;
        let k = trial % n;
        let mut delta = || {
            let u = |stratum: usize, rng: &mut ChaCha8Rng| (stratum as f64 + rng.random::<f64>()) / n as f64;
            let ux = u(sx[k], &mut rng);
            let uy = u(sy[k], &mut rng);
            [(2.0 * ux - 1.0) * r, (2.0 * uy - 1.0) * r]
        };
        match self.mode {
            ExperimentMode::HeadDrift => {
                let d = delta();
                vec![DriftEvent {
                    frame: rng.random_range(15..=45),
                    delta_mm: d,
                }]
            }
            // The stage is moved to its target offset in two equal steps.
            ExperimentMode::ForceDrift => {
                let d = delta();
                let half = [d[0] * 0.5, d[1] * 0.5];
                let first = rng.random_range(15..=30);
                vec![
                    DriftEvent {
                        frame: first,
                        delta_mm: half,
                    },
                    DriftEvent {
                        frame: first + 50,
                        delta_mm: half,
                    },
                ]
            }
            _ => Vec::new(),
        }
    }

    fn trial_world(&self, trial: usize) -> Result<World> {
        let mut cfg = self.phantom.clone();
        cfg.oracle.seed = cfg.oracle.seed.wrapping_add(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        if self.mode.has_drift() {
            cfg.drift_range_mm = self.drift_range_mm;
        }
        Ok(World::from_config(&cfg, trial as u64)?)
    }
}

/// One row of the results table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub mean_x_err_mm: f64,
    pub mean_y_err_mm: f64,
    pub mean_time_s: f64,
    pub hits: usize,
    #[serde(rename = "mean_force_mN")]
    pub mean_force_mn: f64,
    #[serde(rename = "max_force_mN")]
    pub max_force_mn: f64,
}

impl MetricsRow {
    /// Aggregate over the trials that produced a result.
    pub fn from_summaries(summaries: &[TrialSummary]) -> Self {
        let done: Vec<&TrialSummary> = summaries.iter().filter(|s| s.error.is_none()).collect();
        let n = done.len().max(1) as f64;
        let mean = |f: &dyn Fn(&TrialSummary) -> f64| done.iter().map(|s| f(s)).sum::<f64>() / n;
        Self {
            mean_x_err_mm: mean(&|s| s.final_xy_error_mm[0]),
            mean_y_err_mm: mean(&|s| s.final_xy_error_mm[1]),
            mean_time_s: mean(&|s| s.elapsed_virtual_s),
            hits: done.iter().filter(|s| s.hit_retina).count(),
            mean_force_mn: mean(&|s| s.mean_force_mn),
            max_force_mn: done.iter().map(|s| s.max_force_mn).fold(0.0, f64::max),
        }
    }
}

/// Per-trial outcome written at the end of each run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub goal_px: [f64; 2],
    pub reached: bool,
    pub hit_retina: bool,
    pub aborted: Option<String>,
    pub error: Option<String>,
    pub cycles: usize,
    pub elapsed_virtual_s: f64,
    pub final_xy_error_mm: [f64; 2],
    pub final_clearance_mm: f64,
    pub mean_force_mn: f64,
    pub max_force_mn: f64,
    pub reregistration_errors_px: Vec<f64>,
}

impl TrialSummary {
    fn new(trial: usize, goal_px: Vector2<f64>, outcome: &std::result::Result<NavResult, String>) -> Self {
        let goal_px = [goal_px[0], goal_px[1]];
        match outcome {
            Ok(r) => Self {
                trial,
                goal_px,
                reached: r.reached,
                hit_retina: r.hit_retina,
                aborted: r.aborted.clone(),
                error: None,
                cycles: r.cycles,
                elapsed_virtual_s: r.elapsed_virtual_s,
                final_xy_error_mm: r.final_xy_error_mm,
                final_clearance_mm: r.final_clearance_mm,
                mean_force_mn: r.mean_force_mn,
                max_force_mn: r.max_force_mn,
                reregistration_errors_px: r.reregistration_errors_px.clone(),
            },
            Err(e) => Self {
                trial,
                goal_px,
                reached: false,
                hit_retina: false,
                aborted: Some(e.clone()),
                error: Some(e.clone()),
                cycles: 0,
                elapsed_virtual_s: 0.0,
                final_xy_error_mm: [0.0, 0.0],
                final_clearance_mm: 0.0,
                mean_force_mn: 0.0,
                max_force_mn: 0.0,
                reregistration_errors_px: Vec::new(),
            },
        }
    }

    pub fn is_abort(&self) -> bool {
        self.aborted.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub summary: TrialSummary,
    pub drifts: Vec<DriftEvent>,
    pub result: Option<NavResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub name: String,
    pub mode: ExperimentMode,
    pub stop_preset: StopPreset,
    pub metrics: MetricsRow,
    pub trials: Vec<TrialRecord>,
}

impl ExperimentOutcome {
    pub fn results(&self) -> impl Iterator<Item = &NavResult> {
        self.trials.iter().filter_map(|t| t.result.as_ref())
    }

    pub fn summaries(&self) -> Vec<TrialSummary> {
        self.trials.iter().map(|t| t.summary.clone()).collect()
    }
}

fn run_trial(spec: &ExperimentSpec, nav: &NavConfig, trial: usize, goal: Vector2<f64>) -> TrialRecord {
    let drifts = spec.drift_schedule(trial);
    let outcome = spec
        .trial_world(trial)
        .map_err(|e| e.to_string())
        .and_then(|world| {
            match spec.mode {
                ExperimentMode::Baseline => navigate_direct(world, nav, goal, None),
                _ => navigate(world, nav, goal, None, &drifts),
            }
            .map_err(|e| e.to_string())
        });
    TrialRecord {
        summary: TrialSummary::new(trial, goal, &outcome),
        drifts,
        result: outcome.ok(),
    }
}

/// Runs every goal of the suite (trials in parallel) and aggregates the
/// metrics. Fails when more than half of the trials abort.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let nav = spec.nav_config();
    let cam = spec.phantom.camera;
    let goals = spec.goals(&cam);
    let trials: Vec<TrialRecord> = goals
        .par_iter()
        .enumerate()
        .map(|(k, g)| run_trial(spec, &nav, k, *g))
        .collect();
    let summaries: Vec<TrialSummary> = trials.iter().map(|t| t.summary.clone()).collect();
    let aborted = summaries.iter().filter(|s| s.is_abort()).count();
    if aborted * 2 > summaries.len() {
        return Err(HarnessError::TooManyAborts {
            aborted,
            total: summaries.len(),
        });
    }
    Ok(ExperimentOutcome {
        name: spec.name.clone(),
        mode: spec.mode,
        stop_preset: spec.stop_preset,
        metrics: MetricsRow::from_summaries(&summaries),
        trials,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceSummary {
    pub n_trials: usize,
    pub mean_force_mn: f64,
    pub max_force_mn: f64,
    pub samples_over_limit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForceCampaign {
    pub outcome: ExperimentOutcome,
    pub summary: ForceSummary,
}

/// Force-measurement campaign. Forces are rebiased at the start of each
/// trial and averaged from start until the goal is reached.
pub fn run_force_campaign(spec: &ExperimentSpec) -> Result<ForceCampaign> {
    if !spec.mode.is_force() {
        return Err(HarnessError::Invalid(format!("mode {:?} is not a force campaign", spec.mode)));
    }
    let outcome = run_experiment(spec)?;
    let samples_over_limit = outcome
        .results()
        .flat_map(|r| r.force_trace.iter())
        .filter(|f| f.magnitude >= FORCE_SAFE_LIMIT_MN)
        .count();
    let summary = ForceSummary {
        n_trials: outcome.trials.len(),
        mean_force_mn: outcome.metrics.mean_force_mn,
        max_force_mn: outcome.metrics.max_force_mn,
        samples_over_limit,
    };
    Ok(ForceCampaign { outcome, summary })
}

/// Spring constant that makes the MPC force campaign of `spec` average
/// [`FORCE_CALIBRATION_TARGET_MN`]. Forces are linear in `k_s` and do not
/// feed back into the motion, so one unit-stiffness run suffices.
pub fn calibrate_k_s(spec: &ExperimentSpec) -> Result<f64> {
    let mut unit = spec.clone();
    unit.mode = ExperimentMode::ForceMpc;
    unit.phantom.k_s = 1.0;
    let campaign = run_force_campaign(&unit)?;
    let mean = campaign.summary.mean_force_mn;
    if !(mean > 0.0) {
        return Err(HarnessError::Invalid("campaign produced no scleral force".into()));
    }
    Ok(FORCE_CALIBRATION_TARGET_MN / mean)
}

/// The five intact-eye rows of the results table.
pub fn table_bundle(seed: u64) -> Vec<ExperimentSpec> {
    let mut baseline = ExperimentSpec::new("without-chance-constraint", ExperimentMode::Baseline, StopPreset::Um100);
    baseline.phantom.oracle.bias_mm = [0.0, 0.0, -0.15];
    let mut out = vec![
        baseline,
        ExperimentSpec::new("mpc-100um-stop-condition", ExperimentMode::Mpc, StopPreset::Um100),
        ExperimentSpec::new("mpc-300um-stop-condition", ExperimentMode::Mpc, StopPreset::Um300),
        ExperimentSpec::new("head-drift-100um-stop-condition", ExperimentMode::HeadDrift, StopPreset::Um100),
        ExperimentSpec::new("head-drift-300um-stop-condition", ExperimentMode::HeadDrift, StopPreset::Um300),
    ];
    for s in &mut out {
        s.seed = seed;
    }
    out
}

/// Markdown table with one row per experiment.
pub fn render_table(outcomes: &[ExperimentOutcome]) -> String {
    let mut s = String::from(
        "| experiment | goals | mean X error (mm) | mean Y error (mm) | mean time (s) | hits | mean force (mN) | max force (mN) |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for o in outcomes {
        let m = &o.metrics;
        s.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.3} | {} | {:.2} | {:.2} |\n",
            o.name,
            o.trials.len(),
            m.mean_x_err_mm,
            m.mean_y_err_mm,
            m.mean_time_s,
            m.hits,
            m.mean_force_mn,
            m.max_force_mn
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Files.

/// One line of a trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Cycle(CycleRecord),
    Summary(TrialSummary),
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const TABLE_FILE: &str = "table.md";

fn trial_log_name(trial: usize) -> String {
    format!("trial_{trial:03}.jsonl")
}

fn force_trace_name(trial: usize) -> String {
    format!("force_{trial:03}.csv")
}

fn safe_dir_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["mean_x_err_mm", "mean_y_err_mm", "mean_time_s", "hits", "mean_force_mN", "max_force_mN"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?)
}

pub fn write_trial_log(trial: &TrialRecord, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    if let Some(r) = &trial.result {
        for c in &r.cycle_log {
            serde_json::to_writer(&mut w, &LogRecord::Cycle(c.clone()))?;
            w.write_all(b"\n")?;
        }
    }
    serde_json::to_writer(&mut w, &LogRecord::Summary(trial.summary.clone()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_trial_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_force_trace(result: &NavResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for f in &result.force_trace {
        w.serialize(f)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.csv` (one row per outcome), `table.md`, and per
/// experiment a directory with one JSONL log and one force trace per trial.
pub fn export_results(outcomes: &[ExperimentOutcome], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let metrics: Vec<MetricsRow> = outcomes.iter().map(|o| o.metrics).collect();
    let mpath = dir.join(METRICS_FILE);
    write_metrics_csv(&metrics, &mpath)?;
    written.push(mpath);
    let tpath = dir.join(TABLE_FILE);
    fs::write(&tpath, render_table(outcomes))?;
    written.push(tpath);
    for o in outcomes {
        let sub = dir.join(safe_dir_name(&o.name));
        fs::create_dir_all(&sub)?;
        for t in &o.trials {
            let log = sub.join(trial_log_name(t.summary.trial));
            write_trial_log(t, &log)?;
            written.push(log);
            if let Some(r) = &t.result {
                let fpath = sub.join(force_trace_name(t.summary.trial));
                write_force_trace(r, &fpath)?;
                written.push(fpath);
            }
        }
    }
    Ok(written)
}

/// Metrics recomputed from the trial logs of one experiment directory.
pub fn recompute_metrics_from_logs(experiment_dir: &Path) -> Result<MetricsRow> {
    let mut logs: Vec<PathBuf> = fs::read_dir(experiment_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("trial_") && n.ends_with(".jsonl"))
        })
        .collect();
    logs.sort();
    let mut summaries = Vec::with_capacity(logs.len());
    for path in logs {
        let summary = read_trial_log(&path)?.into_iter().rev().find_map(|r| match r {
            LogRecord::Summary(s) => Some(s),
            LogRecord::Cycle(_) => None,
        });
        match summary {
            Some(s) => summaries.push(s),
            None => return Err(HarnessError::Invalid(format!("{} has no summary record", path.display()))),
        }
    }
    summaries.sort_by_key(|s| s.trial);
    Ok(MetricsRow::from_summaries(&summaries))
}

/// Directory under an export root that holds the logs of `name`.
pub fn experiment_dir(root: &Path, name: &str) -> PathBuf {
    root.join(safe_dir_name(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_goals_cover_region() {
        let spec = ExperimentSpec::default();
        let cam = CameraModel::default();
        let goals = spec.goals(&cam);
        assert_eq!(goals.len(), 20);
        let c = cam.center_px();
        for g in &goals {
            assert!((g[0] - c[0]).abs() <= 30.0 && (g[1] - c[1]).abs() <= 40.0);
        }
        assert_eq!(goals, spec.goals(&cam));
        let fixed = ExperimentSpec::new("f", ExperimentMode::ForceDrift, StopPreset::Um100).goals(&cam);
        assert!(fixed.iter().all(|g| *g == c));
    }

    #[test]
    fn preset_overrides_stop_fields() {
        let mut spec = ExperimentSpec::new("x", ExperimentMode::Mpc, StopPreset::Um300);
        spec.nav.stop_norm_mm = 0.05;
        assert_eq!(spec.nav_config().stop_norm_mm, 0.3);
    }

    #[test]
    fn toml_round_trip() {
        let spec = ExperimentSpec::new("drift", ExperimentMode::HeadDrift, StopPreset::Um300);
        let text = spec.to_toml_string().unwrap();
        assert_eq!(ExperimentSpec::from_toml_str(&text, None).unwrap(), spec);
    }

    #[test]
    fn drift_schedules_respect_bounds() {
        let spec = ExperimentSpec::new("f", ExperimentMode::ForceDrift, StopPreset::Um100);
        for t in 0..10 {
            let d = spec.drift_schedule(t);
            assert_eq!(d.len(), 2);
            for e in &d {
                assert!(e.delta_mm.iter().all(|v| v.abs() <= 0.25));
            }
        }
        assert!(ExperimentSpec::default().drift_schedule(0).is_empty());
    }
}
