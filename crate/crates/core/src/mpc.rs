//! Closed-loop navigation of the tool tip to an on-screen goal.
//!
//! [`Navigator`] advances the simulation one camera frame at a time. In the
//! receding-horizon mode every cycle re-predicts the goal with the depth
//! oracle, periodically refits the retinal ellipsoid, solves a trajectory
//! problem with the clearance chance constraint and executes the leading
//! fraction of the plan. The direct mode is the comparison baseline: a
//! straight-line approach to a hand-off distance followed by a single
//! unconstrained trajectory.
//!
//! Time is virtual: each frame costs `dt`, and solver, refit and
//! re-registration work add the latencies from [`LatencyModel`].

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chance::{self, CovarianceStructure};
use crate::ddp::{self, ChanceSpec, CostWeights, DdpError, OCProblem, SolverSettings, Trajectory};
use crate::flow::{self, CornerParams, CropSpec, FlowError, LkParams};
use crate::geometry::{self, EllipsoidEstimate, GeometryError, RegularizationPrior, SamplingConfig};
use crate::phantom::{
    collision_check, render_topdown, scleral_force, CameraModel, DepthOracle, EyePhantom, PhantomConfig, SceneFrame,
    SimError, ToolState,
};
use crate::so3;

#[derive(Debug, Error)]
pub enum NavError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Ddp(#[from] DdpError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("navigation already finished")]
    Finished,
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    /// Stop once the predicted tip-to-goal distance drops below the norm
    /// threshold.
    #[default]
    #[serde(rename = "norm_100um")]
    Norm100um,
    /// Norm threshold plus an image-plane alignment requirement.
    #[serde(rename = "norm_300um_px")]
    Norm300umPx,
}

/// Per-event costs added to the virtual clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub cycle_s: f64,
    pub refit_s: f64,
    pub reregistration_s: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            cycle_s: 0.05,
            refit_s: 0.4,
            reregistration_s: 0.5,
        }
    }
}

/// Parameters of the straight-line baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirectConfig {
    pub speed_mm_s: f64,
    pub handoff_mm: f64,
    /// Keep replanning (without the chance constraint) after the hand-off
    /// instead of executing a single trajectory.
    pub replan: bool,
}

impl Default for DirectConfig {
    fn default() -> Self {
        Self {
            speed_mm_s: 0.08,
            handoff_mm: 2.0,
            replan: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavConfig {
    pub stop_mode: StopMode,
    pub stop_norm_mm: f64,
    pub stop_px: f64,
    pub dt: f64,
    pub horizon_s: f64,
    /// Floor of the shrinking horizon.
    pub min_horizon_s: f64,
    /// Horizon granted to reach a goal that moved (retarget or drift).
    pub reacquire_horizon_s: f64,
    /// Fraction of the initial horizon executed per cycle.
    pub step_fraction: f64,
    pub refit_every: usize,
    pub hover_height_mm: f64,
    /// Planning ellipsoid inset that keeps the tip sphere off the retina.
    pub tool_clearance_mm: f64,
    pub use_chance_constraint: bool,
    pub alpha: f64,
    pub covariance: CovarianceStructure,
    pub prior_lambda: f64,
    /// Nominal eye used as the fitting prior, in microscope coordinates.
    pub prior_center_mm: [f64; 3],
    pub prior_radius_mm: f64,
    pub sampling: SamplingConfig,
    pub weights: CostWeights,
    pub solver: SolverSettings,
    pub max_cycles: usize,
    /// Consecutive fit or solver failures before the run is aborted.
    pub max_failures: usize,
    pub retreat_mm: f64,
    pub latency: LatencyModel,
    /// Frames over which an injected drift is applied.
    pub drift_ramp_frames: usize,
    /// Frames between the end of a drift and the flow re-registration.
    pub flow_latency_frames: usize,
    pub crop: CropSpec,
    pub corners: CornerParams,
    pub lk: LkParams,
    /// Move the believed incision point with the measured eye motion.
    pub update_rcm: bool,
    /// Seed each solve with the unexecuted tail of the previous plan.
    pub warm_start: bool,
    /// Error of the believed incision point along the initial shaft axis.
    pub rcm_axial_error_mm: f64,
    pub start_height_mm: f64,
    pub direct: DirectConfig,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            stop_mode: StopMode::Norm100um,
            stop_norm_mm: 0.1,
            stop_px: 2.3,
            dt: OCProblem::DEFAULT_DT,
            horizon_s: OCProblem::DEFAULT_HORIZON_S,
            min_horizon_s: 1.0,
            reacquire_horizon_s: 2.0,
            step_fraction: 0.2,
            refit_every: 5,
            hover_height_mm: 0.07,
            tool_clearance_mm: crate::phantom::TOOL_TIP_RADIUS,
            use_chance_constraint: true,
            alpha: 0.99,
            covariance: CovarianceStructure::BlockDiagonal,
            prior_lambda: 1.0,
            prior_center_mm: [0.0, 0.0, 0.0],
            prior_radius_mm: 12.0,
            sampling: SamplingConfig::default(),
            weights: CostWeights::default(),
            solver: SolverSettings::default(),
            max_cycles: 60,
            max_failures: 3,
            retreat_mm: 0.1,
            latency: LatencyModel::default(),
            drift_ramp_frames: 30,
            flow_latency_frames: 30,
            crop: CropSpec::default(),
            corners: CornerParams::default(),
            lk: LkParams::default(),
            update_rcm: true,
            warm_start: true,
            rcm_axial_error_mm: 3.0,
            start_height_mm: 4.0,
            direct: DirectConfig::default(),
        }
    }
}

impl NavConfig {
    /// Stop when the predicted distance is below 0.1 mm.
    pub fn preset_100um() -> Self {
        Self::default()
    }

    /// Stop below 0.3 mm once the tip is within 2.3 px of the goal.
    pub fn preset_300um() -> Self {
        Self {
            stop_mode: StopMode::Norm300umPx,
            stop_norm_mm: 0.3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NavError> {
        let bad = |m: &str| Err(NavError::Config(m.to_string()));
        if !(self.dt > 0.0) || !(self.horizon_s >= 2.0 * self.dt) {
            return bad("dt and horizon must be positive");
        }
        if !(self.step_fraction > 0.0 && self.step_fraction <= 1.0) {
            return bad("step_fraction must lie in (0, 1]");
        }
        if self.refit_every == 0 {
            return bad("refit_every must be at least 1");
        }
        if !(self.alpha > 0.5 && self.alpha < 1.0) {
            return bad("alpha must lie in (0.5, 1)");
        }
        if !(self.stop_norm_mm > 0.0) || !(self.stop_px > 0.0) {
            return bad("stop thresholds must be positive");
        }
        if self.drift_ramp_frames == 0 {
            return bad("drift_ramp_frames must be at least 1");
        }
        if !(self.direct.speed_mm_s > 0.0) {
            return bad("direct speed must be positive");
        }
        Ok(())
    }

    fn horizon_steps(&self) -> usize {
        (self.horizon_s / self.dt).round() as usize
    }

    fn min_steps(&self) -> usize {
        ((self.min_horizon_s / self.dt).round() as usize).max(2)
    }

    fn reacquire_steps(&self) -> usize {
        (self.reacquire_horizon_s / self.dt).round() as usize
    }

    fn exec_steps(&self) -> usize {
        ((self.step_fraction * self.horizon_steps() as f64).round() as usize).max(1)
    }
}

/// Stopping rule. `xy_error_px` is the image distance between the tool tip
/// and the tracked goal pixel.
pub fn check_stop(d_pred: &Vector3<f64>, xy_error_px: f64, cfg: &NavConfig) -> bool {
    let close = d_pred.norm() < cfg.stop_norm_mm;
    match cfg.stop_mode {
        StopMode::Norm100um => close,
        StopMode::Norm300umPx => close && xy_error_px < cfg.stop_px,
    }
}

/// The simulated world seen by a navigator: ground-truth eye, camera, depth
/// oracle and the scleral spring constant.
#[derive(Debug, Clone)]
pub struct World {
    pub phantom: EyePhantom,
    pub camera: CameraModel,
    pub oracle: DepthOracle,
    pub k_s: f64,
}

impl World {
    /// World for trial `stream` of a phantom description.
    pub fn from_config(cfg: &PhantomConfig, stream: u64) -> Result<Self, SimError> {
        Ok(Self {
            phantom: cfg.phantom()?,
            camera: cfg.camera,
            oracle: DepthOracle::with_stream(cfg.oracle.clone(), stream)?,
            k_s: cfg.k_s,
        })
    }

    /// Tool at rest `height` mm above the retina under the view center,
    /// its shaft through the incision point.
    pub fn start_pose(&self, height: f64) -> Result<ToolState, SimError> {
        let below = self.phantom.goal_point(&self.camera.center_px(), &self.camera)?;
        let tip = below + Vector3::new(0.0, 0.0, height);
        Ok(ToolState::through_pivot(tip, self.phantom.incision_point))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    /// Frame index at which the drift starts.
    pub frame: usize,
    pub delta_mm: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceSample {
    pub t: f64,
    pub fx: f64,
    pub fy: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub frame: usize,
    pub t_virtual: f64,
    pub tool: ToolState,
    pub prediction: Vector3<f64>,
    /// Clearance margin at the tip under the current estimate.
    pub margin_g: Option<f64>,
    pub force_mn: f64,
    pub goal_estimate: Vector3<f64>,
    pub target: Vector3<f64>,
    pub horizon_steps: usize,
    pub refit: bool,
    pub solver_iterations: usize,
    pub solver_converged: bool,
    pub max_chance_margin: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavResult {
    pub reached: bool,
    pub hit_retina: bool,
    pub aborted: Option<String>,
    pub elapsed_virtual_s: f64,
    pub frames: usize,
    pub cycles: usize,
    pub refits: usize,
    pub final_tip: Vector3<f64>,
    /// Ground-truth goal on the retina, carried along with any drift.
    pub final_goal: Vector3<f64>,
    /// Absolute X and Y landing errors.
    pub final_xy_error_mm: [f64; 2],
    pub final_clearance_mm: f64,
    pub min_clearance_mm: f64,
    pub final_prediction: Vector3<f64>,
    pub mean_force_mn: f64,
    pub max_force_mn: f64,
    pub reregistration_errors_px: Vec<f64>,
    pub path: Vec<ToolState>,
    pub force_trace: Vec<ForceSample>,
    pub cycle_log: Vec<CycleRecord>,
}

/// Lightweight view of a running navigator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavSnapshot {
    pub frame: usize,
    pub t_virtual: f64,
    pub tool: ToolState,
    pub goal_px: [f64; 2],
    pub last_prediction: Option<Vector3<f64>>,
    /// Chance margin of the most recent plan, when the constraint is active.
    pub margin_g: Option<f64>,
    pub force_mn: f64,
    pub cycles: usize,
    pub done: bool,
    pub reached: bool,
    pub hit_retina: bool,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Running,
    Done,
}

#[derive(Debug, Clone)]
enum Mode {
    Receding,
    Direct(DirectPhase),
}

#[derive(Debug, Clone)]
enum DirectPhase {
    Start,
    Approach { target: Vector3<f64> },
    Final,
}

#[derive(Debug, Clone)]
struct DriftRamp {
    step: Vector2<f64>,
    frames_left: usize,
    reference: SceneFrame,
    true_shift_px: Vector2<f64>,
    registration_frame: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Navigator {
    world: World,
    cfg: NavConfig,
    mode: Mode,
    tool: ToolState,
    goal_px: Vector2<f64>,
    true_goal: Vector3<f64>,
    p_s_belief: Vector3<f64>,
    prior: RegularizationPrior,
    estimate: Option<EllipsoidEstimate>,
    plan: Option<Trajectory>,
    plan_index: usize,
    plan_exec: usize,
    goal_samples: Vec<Vector3<f64>>,
    frame: usize,
    /// Frame by which the current approach should arrive.
    arrival_frame: usize,
    latency_s: f64,
    cycles: usize,
    refits: usize,
    cycles_since_refit: usize,
    refit_requested: bool,
    failures: usize,
    force_bias: Vector2<f64>,
    drift: Option<DriftRamp>,
    last_prediction: Option<Vector3<f64>>,
    done: bool,
    reached: bool,
    hit: bool,
    aborted: Option<String>,
    min_clearance: f64,
    path: Vec<ToolState>,
    force_trace: Vec<ForceSample>,
    cycle_log: Vec<CycleRecord>,
    reregistration_errors: Vec<f64>,
}

impl Navigator {
    /// Receding-horizon navigator.
    pub fn new(world: World, cfg: NavConfig, goal_px: Vector2<f64>, start: ToolState) -> Result<Self, NavError> {
        Self::build(world, cfg, goal_px, start, Mode::Receding)
    }

    /// Straight-line baseline navigator.
    pub fn new_direct(world: World, cfg: NavConfig, goal_px: Vector2<f64>, start: ToolState) -> Result<Self, NavError> {
        Self::build(world, cfg, goal_px, start, Mode::Direct(DirectPhase::Start))
    }

    fn build(world: World, cfg: NavConfig, goal_px: Vector2<f64>, start: ToolState, mode: Mode) -> Result<Self, NavError> {
        cfg.validate()?;
        let true_goal = world.phantom.goal_point(&goal_px, &world.camera)?;
        let axis = start.shaft_axis();
        let p_s_belief = world.phantom.incision_point + axis * cfg.rcm_axial_error_mm;
        let force_bias = scleral_force(&start, &world.phantom, world.k_s);
        let clearance = world.phantom.surface_signed_distance(&start.p);
        Ok(Self {
            mode,
            tool: start,
            goal_px,
            true_goal,
            p_s_belief,
            prior: RegularizationPrior {
                center0: Vector3::from(cfg.prior_center_mm),
                radius0: cfg.prior_radius_mm,
                lambda: cfg.prior_lambda,
            },
            estimate: None,
            plan: None,
            plan_index: 0,
            plan_exec: 0,
            goal_samples: Vec::new(),
            frame: 0,
            arrival_frame: cfg.horizon_steps(),
            latency_s: 0.0,
            cycles: 0,
            refits: 0,
            cycles_since_refit: 0,
            refit_requested: true,
            failures: 0,
            force_bias,
            drift: None,
            last_prediction: None,
            done: false,
            reached: false,
            hit: clearance < crate::phantom::TOOL_TIP_RADIUS,
            aborted: None,
            min_clearance: clearance,
            path: vec![start],
            force_trace: vec![ForceSample {
                t: 0.0,
                fx: 0.0,
                fy: 0.0,
                magnitude: 0.0,
            }],
            cycle_log: Vec::new(),
            reregistration_errors: Vec::new(),
            world,
            cfg,
        })
    }

    pub fn config(&self) -> &NavConfig {
        &self.cfg
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn tool(&self) -> &ToolState {
        &self.tool
    }

    pub fn goal_px(&self) -> Vector2<f64> {
        self.goal_px
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn t_virtual(&self) -> f64 {
        self.frame as f64 * self.cfg.dt + self.latency_s
    }

    pub fn snapshot(&self) -> NavSnapshot {
        NavSnapshot {
            frame: self.frame,
            t_virtual: self.t_virtual(),
            tool: self.tool,
            goal_px: [self.goal_px[0], self.goal_px[1]],
            last_prediction: self.last_prediction,
            margin_g: self.cycle_log.last().and_then(|c| c.margin_g),
            force_mn: self.force_trace.last().map_or(0.0, |f| f.magnitude),
            cycles: self.cycles,
            done: self.done,
            reached: self.reached,
            hit_retina: self.hit,
            aborted: self.aborted.clone(),
        }
    }

    /// Current microscope image.
    pub fn render(&self) -> SceneFrame {
        render_topdown(&self.world.phantom, &self.tool, &self.world.camera, self.t_virtual())
    }

    /// Ends the run early (operator stop).
    pub fn stop(&mut self) {
        if !self.done {
            self.done = true;
            self.aborted.get_or_insert_with(|| "stopped by operator".into());
        }
    }

    /// Retargets the run to a new on-screen goal.
    pub fn set_goal(&mut self, goal_px: Vector2<f64>) -> Result<(), NavError> {
        if self.done {
            return Err(NavError::Finished);
        }
        let goal = self.world.phantom.goal_point(&goal_px, &self.world.camera)?;
        self.goal_px = goal_px;
        self.true_goal = goal;
        self.goal_samples.clear();
        self.refit_requested = true;
        self.plan_index = self.plan_exec;
        self.arrival_frame = self.arrival_frame.max(self.frame + self.cfg.reacquire_steps());
        Ok(())
    }

    /// Starts a rigid XY motion of the eye by `delta_mm`, spread over
    /// `drift_ramp_frames` frames and followed by a flow re-registration.
    pub fn inject_drift(&mut self, delta_mm: Vector2<f64>) -> Result<(), NavError> {
        if self.done {
            return Err(NavError::Finished);
        }
        let limit = self.world.phantom.drift_range;
        if delta_mm.iter().any(|d| !d.is_finite() || d.abs() > limit + 1e-12) {
            return Err(SimError::DriftOutOfRange {
                dx: delta_mm[0],
                dy: delta_mm[1],
                limit,
            }
            .into());
        }
        if self.drift.is_some() {
            return Err(NavError::Config("a drift is already in progress".into()));
        }
        let n = self.cfg.drift_ramp_frames;
        self.drift = Some(DriftRamp {
            step: delta_mm / n as f64,
            frames_left: n,
            reference: self.render(),
            true_shift_px: delta_mm / self.world.camera.mm_per_px,
            registration_frame: None,
        });
        Ok(())
    }

    /// Runs until the navigator finishes.
    pub fn run(mut self, drifts: &[DriftEvent]) -> Result<NavResult, NavError> {
        let mut pending: Vec<DriftEvent> = drifts.to_vec();
        pending.sort_by_key(|d| d.frame);
        let mut next = 0;
        while !self.done {
            while next < pending.len() && pending[next].frame <= self.frame && self.drift.is_none() {
                let d = pending[next];
                self.inject_drift(Vector2::new(d.delta_mm[0], d.delta_mm[1]))?;
                next += 1;
            }
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> NavResult {
        let forces: Vec<f64> = self.force_trace.iter().map(|f| f.magnitude).collect();
        let mean_force = forces.iter().sum::<f64>() / forces.len().max(1) as f64;
        let max_force = forces.iter().cloned().fold(0.0, f64::max);
        let d = self.tool.p - self.true_goal;
        NavResult {
            reached: self.reached,
            hit_retina: self.hit,
            aborted: self.aborted,
            elapsed_virtual_s: self.frame as f64 * self.cfg.dt + self.latency_s,
            frames: self.frame,
            cycles: self.cycles,
            refits: self.refits,
            final_tip: self.tool.p,
            final_goal: self.true_goal,
            final_xy_error_mm: [d[0].abs(), d[1].abs()],
            final_clearance_mm: self.world.phantom.surface_signed_distance(&self.tool.p),
            min_clearance_mm: self.min_clearance,
            final_prediction: self.last_prediction.unwrap_or_default(),
            mean_force_mn: mean_force,
            max_force_mn: max_force,
            reregistration_errors_px: self.reregistration_errors,
            path: self.path,
            force_trace: self.force_trace,
            cycle_log: self.cycle_log,
        }
    }

    /// Advances one camera frame.
    pub fn step(&mut self) -> Result<StepStatus, NavError> {
        if self.done {
            return Ok(StepStatus::Done);
        }
        self.advance_drift()?;

        let d = match self.sense() {
            Ok(d) => d,
            Err(e) => {
                self.abort(e.to_string());
                return Ok(StepStatus::Done);
            }
        };

        match self.mode.clone() {
            Mode::Receding => self.step_receding(&d)?,
            Mode::Direct(phase) => self.step_direct(phase, &d)?,
        }
        Ok(if self.done { StepStatus::Done } else { StepStatus::Running })
    }

    fn step_receding(&mut self, d: &Vector3<f64>) -> Result<(), NavError> {
        let xy_px = (self.world.camera.world_to_px(&self.tool.p) - self.goal_px).norm();
        if self.drift.is_none() && check_stop(d, xy_px, &self.cfg) {
            self.reached = true;
            self.done = true;
            return Ok(());
        }
        if self.cycles >= self.cfg.max_cycles && self.plan_index >= self.plan_exec {
            self.abort("cycle limit reached".into());
            return Ok(());
        }
        if self.plan.is_none() || self.plan_index >= self.plan_exec {
            self.replan()?;
            if self.done {
                return Ok(());
            }
        }
        self.execute_next();
        Ok(())
    }

    fn step_direct(&mut self, phase: DirectPhase, d: &Vector3<f64>) -> Result<(), NavError> {
        match phase {
            DirectPhase::Start => {
                let target = self.tool.p + d;
                self.mode = Mode::Direct(DirectPhase::Approach { target });
                self.approach_step(&target);
            }
            DirectPhase::Approach { target } => {
                if (target - self.tool.p).norm() <= self.cfg.direct.handoff_mm {
                    self.direct_handoff(d)?;
                    if !self.done {
                        self.execute_next();
                    }
                } else {
                    self.approach_step(&target);
                }
            }
            DirectPhase::Final => {
                // The baseline has no stop test: it arrives when its single
                // trajectory has been executed.
                if self.plan_index >= self.plan_exec {
                    self.reached = true;
                    self.done = true;
                } else {
                    self.execute_next();
                }
            }
        }
        Ok(())
    }

    /// One frame of constant-speed straight-line motion, shaft pivoting
    /// kinematically about the believed incision point.
    fn approach_step(&mut self, target: &Vector3<f64>) {
        let dt = self.cfg.dt;
        let to = target - self.tool.p;
        let dist = to.norm();
        let step = (self.cfg.direct.speed_mm_s * dt).min((dist - self.cfg.direct.handoff_mm).max(0.0));
        let dir = if dist > 0.0 { to / dist } else { Vector3::zeros() };
        let p = self.tool.p + dir * step;
        let r = so3::frame_with_z(&(self.p_s_belief - p));
        let next = ToolState {
            p,
            r,
            v: dir * (step / dt),
            w: Vector3::zeros(),
        };
        self.advance_to(next);
    }

    fn direct_handoff(&mut self, d: &Vector3<f64>) -> Result<(), NavError> {
        self.arrival_frame = self.frame + self.cfg.horizon_steps();
        if self.cfg.direct.replan {
            self.cfg.use_chance_constraint = false;
            self.mode = Mode::Receding;
            self.goal_samples = vec![self.tool.p + d];
            self.tool.w = Vector3::zeros();
            return self.replan();
        }
        let goal_hat = self.tool.p + d;
        let normal = (goal_hat - self.prior.center0).normalize();
        let target = goal_hat - normal * self.cfg.hover_height_mm;
        let x0 = ToolState { w: Vector3::zeros(), ..self.tool };
        let prob = self.problem(x0, target, self.cfg.horizon_steps(), None);
        self.latency_s += self.cfg.latency.cycle_s;
        self.cycles += 1;
        let (traj, report, note) = match ddp::solve(&prob, None) {
            Ok(sol) => (sol.trajectory, sol.report, None),
            Err(DdpError::Stalled(sol)) => (sol.trajectory, sol.report, Some("solver stalled".to_string())),
            Err(e) => {
                self.abort(e.to_string());
                return Ok(());
            }
        };
        self.tool = x0;
        self.log_cycle(goal_hat, target, prob.n_steps, false, &report, note);
        self.plan_exec = traj.controls.len();
        self.plan = Some(traj);
        self.plan_index = 0;
        self.mode = Mode::Direct(DirectPhase::Final);
        Ok(())
    }

    fn problem(&self, x0: ToolState, target: Vector3<f64>, n_steps: usize, chance: Option<ChanceSpec>) -> OCProblem {
        OCProblem {
            dt: self.cfg.dt,
            n_steps,
            weights: self.cfg.weights,
            goal: target,
            incision: self.p_s_belief,
            chance,
            x0,
            settings: self.cfg.solver,
        }
    }

    fn sense(&mut self) -> Result<Vector3<f64>, SimError> {
        let d = self
            .world
            .oracle
            .predict(&self.tool.p, &self.goal_px, &self.world.phantom, &self.world.camera)?;
        self.goal_samples.push(self.tool.p + d);
        self.last_prediction = Some(d);
        Ok(d)
    }

    fn abort(&mut self, reason: String) {
        self.aborted = Some(reason);
        self.done = true;
    }

    fn refit(&mut self) -> Result<(), GeometryError> {
        let prior = self.prior;
        let est = geometry::estimate_covariance(
            &self.goal_px,
            &prior,
            &self.cfg.sampling,
            &self.tool.p,
            &self.world.phantom,
            &self.world.camera,
            &mut self.world.oracle,
        )?;
        self.estimate = Some(est.inset(self.cfg.tool_clearance_mm)?);
        Ok(())
    }

    fn replan(&mut self) -> Result<(), NavError> {
        self.cycles += 1;
        self.latency_s += self.cfg.latency.cycle_s;
        let mut notes: Vec<String> = Vec::new();

        let mut refit_done = false;
        if self.cfg.use_chance_constraint && (self.refit_requested || self.cycles_since_refit >= self.cfg.refit_every) {
            self.latency_s += self.cfg.latency.refit_s;
            match self.refit() {
                Ok(()) => {
                    self.refits += 1;
                    self.cycles_since_refit = 0;
                    self.refit_requested = false;
                    refit_done = true;
                }
                Err(e) => {
                    self.failures += 1;
                    notes.push(format!("refit failed: {e}"));
                }
            }
        }
        self.cycles_since_refit += 1;

        let n_goal = self.goal_samples.len().max(1);
        let goal_hat = self.goal_samples.iter().sum::<Vector3<f64>>() / n_goal as f64;
        self.goal_samples.clear();

        let chance = if self.cfg.use_chance_constraint {
            self.estimate.clone().map(|estimate| ChanceSpec {
                estimate,
                alpha: self.cfg.alpha,
                structure: self.cfg.covariance,
            })
        } else {
            None
        };
        let normal = match &chance {
            Some(c) => c.estimate.outward_normal(&goal_hat),
            None => (goal_hat - self.prior.center0).normalize(),
        };
        let target = goal_hat - normal * self.cfg.hover_height_mm;

        let n_steps = self.arrival_frame.saturating_sub(self.frame).max(self.cfg.min_steps());

        let warm = self.plan.as_ref().filter(|_| self.cfg.warm_start).map(|p| Trajectory {
            states: Vec::new(),
            controls: p.controls.iter().skip(self.plan_index).cloned().collect(),
            dt: p.dt,
        });

        let needs_chance = chance.is_some();
        if self.cfg.use_chance_constraint && !needs_chance {
            notes.push("no estimate: holding".into());
            self.failures += 1;
            let prob = self.problem(self.tool, self.tool.p, self.cfg.min_steps(), None);
            self.adopt_plan(&prob, None, goal_hat, notes, refit_done);
            return Ok(());
        }

        let prob = self.problem(self.tool, target, n_steps, chance);
        match ddp::solve(&prob, warm.as_ref()) {
            Ok(sol) => {
                self.failures = 0;
                self.install(sol.trajectory, &sol.report, goal_hat, target, n_steps, refit_done, notes);
            }
            Err(DdpError::Stalled(sol)) => {
                self.failures += 1;
                notes.push("solver stalled".into());
                if sol.report.max_chance_margin <= 1e-6 && sol.report.max_scleral_residual < 1e-3 {
                    self.install(sol.trajectory, &sol.report, goal_hat, target, n_steps, refit_done, notes);
                } else {
                    let hold = self.problem(self.tool, self.tool.p, self.cfg.min_steps(), None);
                    self.adopt_plan(&hold, None, goal_hat, notes, refit_done);
                }
            }
            Err(DdpError::InfeasibleStart(g)) => {
                notes.push(format!("retreat (margin {g:.2e})"));
                let out = prob.chance.as_ref().map(|c| c.estimate.outward_normal(&self.tool.p)).unwrap_or(normal);
                let retreat = self.tool.p - out * self.cfg.retreat_mm;
                let rp = self.problem(self.tool, retreat, self.cfg.min_steps(), None);
                self.adopt_plan(&rp, None, goal_hat, notes, refit_done);
            }
            Err(e) => return Err(e.into()),
        }
        if self.failures >= self.cfg.max_failures {
            self.abort(format!("{} consecutive planning failures", self.failures));
        }
        Ok(())
    }

    fn adopt_plan(&mut self, prob: &OCProblem, warm: Option<&Trajectory>, goal_hat: Vector3<f64>, notes: Vec<String>, refit: bool) {
        match ddp::solve(prob, warm) {
            Ok(sol) => self.install(sol.trajectory, &sol.report, goal_hat, prob.goal, prob.n_steps, refit, notes),
            Err(DdpError::Stalled(sol)) => {
                self.install(sol.trajectory, &sol.report, goal_hat, prob.goal, prob.n_steps, refit, notes)
            }
            Err(e) => self.abort(e.to_string()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn install(
        &mut self,
        traj: Trajectory,
        report: &ddp::SolverReport,
        goal_hat: Vector3<f64>,
        target: Vector3<f64>,
        n_steps: usize,
        refit: bool,
        notes: Vec<String>,
    ) {
        let note = if notes.is_empty() { None } else { Some(notes.join("; ")) };
        self.log_cycle(goal_hat, target, n_steps, refit, report, note);
        self.plan_exec = self.cfg.exec_steps().min(traj.controls.len());
        self.plan = Some(traj);
        self.plan_index = 0;
    }

    fn log_cycle(
        &mut self,
        goal_hat: Vector3<f64>,
        target: Vector3<f64>,
        n_steps: usize,
        refit: bool,
        report: &ddp::SolverReport,
        note: Option<String>,
    ) {
        self.cycle_log.push(CycleRecord {
            cycle: self.cycles,
            frame: self.frame,
            t_virtual: self.t_virtual(),
            tool: self.tool,
            prediction: self.last_prediction.unwrap_or_default(),
            margin_g: self
                .estimate
                .as_ref()
                .filter(|_| self.cfg.use_chance_constraint)
                .and_then(|e| chance::margin_at(&self.tool.p, e, self.cfg.alpha, self.cfg.covariance).ok())
                .map(|m| m.g),
            force_mn: self.force_trace.last().map_or(0.0, |f| f.magnitude),
            goal_estimate: goal_hat,
            target,
            horizon_steps: n_steps,
            refit,
            solver_iterations: report.iterations,
            solver_converged: report.converged,
            max_chance_margin: report.max_chance_margin.is_finite().then_some(report.max_chance_margin),
            note,
        });
    }

    fn execute_next(&mut self) {
        let u = self
            .plan
            .as_ref()
            .and_then(|p| p.controls.get(self.plan_index).copied())
            .unwrap_or_default();
        self.plan_index += 1;
        let next = ddp::dynamics_step(&self.tool, &u, self.cfg.dt);
        self.advance_to(next);
    }

    /// Moves the tool to `next`, advancing the clock and recording contact,
    /// clearance and force.
    fn advance_to(&mut self, next: ToolState) {
        let seg = [self.tool.p, next.p];
        if collision_check(&seg, &self.world.phantom) {
            self.hit = true;
        }
        self.tool = next;
        self.frame += 1;
        let clearance = self.world.phantom.surface_signed_distance(&next.p);
        self.min_clearance = self.min_clearance.min(clearance);
        self.path.push(next);
        let f = scleral_force(&next, &self.world.phantom, self.world.k_s) - self.force_bias;
        self.force_trace.push(ForceSample {
            t: self.t_virtual(),
            fx: f[0],
            fy: f[1],
            magnitude: f.norm(),
        });
    }

    fn advance_drift(&mut self) -> Result<(), NavError> {
        let Some(ramp) = self.drift.as_mut() else {
            return Ok(());
        };
        if ramp.frames_left > 0 {
            let step = ramp.step;
            ramp.frames_left -= 1;
            if ramp.frames_left == 0 {
                ramp.registration_frame = Some(self.frame + self.cfg.flow_latency_frames);
            }
            self.world.phantom.apply_drift(step)?;
            self.true_goal += Vector3::new(step[0], step[1], 0.0);
            return Ok(());
        }
        if ramp.registration_frame.is_some_and(|f| self.frame >= f) {
            let ramp = self.drift.take().expect("checked above");
            self.reregister(ramp);
        }
        Ok(())
    }

    fn reregister(&mut self, ramp: DriftRamp) {
        self.latency_s += self.cfg.latency.reregistration_s;
        let current = self.render();
        let tracked = flow::track_frames(
            &ramp.reference.image,
            &current.image,
            &self.cfg.crop,
            &self.cfg.corners,
            &self.cfg.lk,
        );
        let shift = match tracked {
            Ok(r) => r.global_shift,
            Err(e) => {
                self.failures += 1;
                self.cycle_log_note(format!("re-registration failed: {e}"));
                return;
            }
        };
        self.reregistration_errors.push((shift - ramp.true_shift_px).norm());
        match flow::update_goal_rcm(&shift, &self.goal_px, &self.p_s_belief, &self.world.camera) {
            Ok((goal, p_s_new)) => {
                self.goal_px = goal;
                if self.cfg.update_rcm {
                    self.p_s_belief = p_s_new;
                }
            }
            Err(e) => {
                self.abort(e.to_string());
                return;
            }
        }
        let mm = shift * self.world.camera.mm_per_px;
        let shift3 = Vector3::new(mm[0], mm[1], 0.0);
        self.prior.center0 += shift3;
        if let Some(est) = &self.estimate {
            self.estimate = Some(est.translated(&shift3));
        }
        self.goal_samples.clear();
        self.refit_requested = true;
        self.plan_index = self.plan_exec;
        self.arrival_frame = self.arrival_frame.max(self.frame + self.cfg.reacquire_steps());
    }

    fn cycle_log_note(&mut self, note: String) {
        if let Some(last) = self.cycle_log.last_mut() {
            last.note = Some(match last.note.take() {
                Some(n) => format!("{n}; {note}"),
                None => note,
            });
        }
    }
}

/// Receding-horizon navigation from `start` (or the default start pose).
pub fn navigate(
    world: World,
    cfg: &NavConfig,
    goal_px: Vector2<f64>,
    start: Option<ToolState>,
    drifts: &[DriftEvent],
) -> Result<NavResult, NavError> {
    let start = match start {
        Some(s) => s,
        None => world.start_pose(cfg.start_height_mm)?,
    };
    Navigator::new(world, cfg.clone(), goal_px, start)?.run(drifts)
}

/// Straight-line approach to the hand-off distance, one oracle refresh and a
/// single unconstrained trajectory with no replanning.
pub fn navigate_direct(world: World, cfg: &NavConfig, goal_px: Vector2<f64>, start: Option<ToolState>) -> Result<NavResult, NavError> {
    let start = match start {
        Some(s) => s,
        None => world.start_pose(cfg.start_height_mm)?,
    };
    Navigator::new_direct(world, cfg.clone(), goal_px, start)?.run(&[])
}
