//! Trajectory optimization for the instrument: iterative LQR / DDP on the
//! rigid-body state `(p, R, v, ω)` with an error-state parameterization of
//! the orientation.
//!
//! The objective is quadratic control effort plus a quadratic terminal cost.
//! The remote-center constraint enters as a quadratic penalty on the shaft
//! residual; the clearance chance constraint enters through an augmented
//! Lagrangian per knot.

use nalgebra::{Matrix3, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chance::{margin_at, CovarianceStructure};
use crate::geometry::EllipsoidEstimate;
use crate::phantom::ToolState;
use crate::so3;

pub const NX: usize = 12;
pub const NU: usize = 6;
pub type StateVec = SVector<f64, NX>;
pub type ControlVec = SVector<f64, NU>;
pub type MatXX = SMatrix<f64, NX, NX>;
pub type MatXU = SMatrix<f64, NX, NU>;
pub type MatUX = SMatrix<f64, NU, NX>;
pub type MatUU = SMatrix<f64, NU, NU>;

/// Margin tolerated at the initial state, so that a state left on the
/// boundary by a previous solve is still a valid start.
pub const START_MARGIN_SLACK: f64 = 1e-6;

const P: usize = 0;
const TH: usize = 3;
const V: usize = 6;
const W: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DdpError {
    #[error("solver stalled")]
    Stalled(Box<Solution>),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("initial state violates the clearance constraint (margin {0:.3e})")]
    InfeasibleStart(f64),
}

/// Translational and angular acceleration commands.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub u_v: Vector3<f64>,
    pub u_w: Vector3<f64>,
}

impl Control {
    pub fn to_vec(&self) -> ControlVec {
        let mut u = ControlVec::zeros();
        u.fixed_rows_mut::<3>(0).copy_from(&self.u_v);
        u.fixed_rows_mut::<3>(3).copy_from(&self.u_w);
        u
    }

    pub fn from_vec(u: &ControlVec) -> Self {
        Self {
            u_v: u.fixed_rows::<3>(0).into_owned(),
            u_w: u.fixed_rows::<3>(3).into_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<ToolState>,
    pub controls: Vec<Control>,
    pub dt: f64,
}

impl Trajectory {
    /// Forward simulation of a control sequence.
    pub fn rollout(x0: ToolState, controls: Vec<Control>, dt: f64) -> Self {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0);
        for u in &controls {
            let next = dynamics_step(states.last().unwrap(), u, dt);
            states.push(next);
        }
        Self { states, controls, dt }
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.states.iter().map(|s| s.p).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub iterations: usize,
    pub final_cost: f64,
    pub max_scleral_residual: f64,
    pub max_chance_margin: f64,
    pub max_dynamics_defect: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub trajectory: Trajectory,
    pub report: SolverReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    /// Terminal position weight, mm⁻².
    pub q_pos: f64,
    pub q_vel: f64,
    pub q_omega: f64,
    pub r_v: f64,
    pub r_w: f64,
    /// Per-knot penalty on the squared shaft residual, mm⁻².
    pub w_sclera: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            q_pos: 1e4,
            q_vel: 1e2,
            q_omega: 1e2,
            r_v: 1.0,
            r_w: 1.0,
            w_sclera: 1e4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_outer: usize,
    pub max_inner: usize,
    pub tolerance: f64,
    pub line_search_factor: f64,
    pub line_search_trials: usize,
    pub penalty_init: f64,
    pub penalty_factor: f64,
    pub penalty_max: f64,
    pub feasibility_tol: f64,
    pub mu_init: f64,
    pub mu_max: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_outer: 100,
            max_inner: 60,
            tolerance: 1e-9,
            line_search_factor: 0.5,
            line_search_trials: 16,
            penalty_init: 1e3,
            penalty_factor: 10.0,
            penalty_max: 1e8,
            feasibility_tol: 1e-8,
            mu_init: 1e-6,
            mu_max: 1e10,
        }
    }
}

/// Clearance constraint `g(p) <= 0` built from an ellipsoid estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceSpec {
    pub estimate: EllipsoidEstimate,
    pub alpha: f64,
    pub structure: CovarianceStructure,
}

impl ChanceSpec {
    pub fn evaluate(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>, Matrix3<f64>) {
        match margin_at(p, &self.estimate, self.alpha, self.structure) {
            Ok(m) => (m.g, m.gradient_p, m.hessian_p),
            // Only reachable at the ellipsoid center, deep on the safe side.
            Err(_) => (-1.0, Vector3::zeros(), Matrix3::zeros()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OCProblem {
    pub dt: f64,
    pub n_steps: usize,
    pub weights: CostWeights,
    pub goal: Vector3<f64>,
    pub incision: Vector3<f64>,
    pub chance: Option<ChanceSpec>,
    pub x0: ToolState,
    pub settings: SolverSettings,
}

impl OCProblem {
    pub const DEFAULT_DT: f64 = 1.0 / 15.0;
    pub const DEFAULT_HORIZON_S: f64 = 5.0;

    pub fn new(x0: ToolState, goal: Vector3<f64>, incision: Vector3<f64>) -> Self {
        Self {
            dt: Self::DEFAULT_DT,
            n_steps: (Self::DEFAULT_HORIZON_S / Self::DEFAULT_DT).round() as usize,
            weights: CostWeights::default(),
            goal,
            incision,
            chance: None,
            x0,
            settings: SolverSettings::default(),
        }
    }

    pub fn horizon_s(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn validate(&self) -> Result<(), DdpError> {
        if !(self.dt > 0.0) {
            return Err(DdpError::InvalidProblem("dt must be positive".into()));
        }
        if self.n_steps < 2 {
            return Err(DdpError::InvalidProblem("at least two steps required".into()));
        }
        let w = &self.weights;
        if [w.q_pos, w.q_vel, w.q_omega, w.r_v, w.r_w, w.w_sclera]
            .iter()
            .any(|x| !(*x >= 0.0))
        {
            return Err(DdpError::InvalidProblem("weights must be non-negative".into()));
        }
        if !(w.r_v > 0.0 && w.r_w > 0.0) {
            return Err(DdpError::InvalidProblem("control weights must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Dynamics.

/// Semi-implicit Euler step of the unit-mass, unit-inertia rigid body.
pub fn dynamics_step(x: &ToolState, u: &Control, dt: f64) -> ToolState {
    let v = x.v + u.u_v * dt;
    let p = x.p + v * dt;
    let w = x.w + u.u_w * dt;
    let r = so3::orthonormalize(&(x.r * so3::exp(&(w * dt))));
    ToolState { p, r, v, w }
}

/// Perturbs a state along the error coordinates `[δp, δθ, δv, δω]`
/// (orientation on the right: `R exp(δθ)`).
pub fn retract(x: &ToolState, dx: &StateVec) -> ToolState {
    ToolState {
        p: x.p + dx.fixed_rows::<3>(P),
        r: x.r * so3::exp(&dx.fixed_rows::<3>(TH).into_owned()),
        v: x.v + dx.fixed_rows::<3>(V),
        w: x.w + dx.fixed_rows::<3>(W),
    }
}

/// Error coordinates of `x` relative to `reference`.
pub fn state_difference(x: &ToolState, reference: &ToolState) -> StateVec {
    let mut d = StateVec::zeros();
    d.fixed_rows_mut::<3>(P).copy_from(&(x.p - reference.p));
    d.fixed_rows_mut::<3>(TH).copy_from(&so3::log(&(reference.r.transpose() * x.r)));
    d.fixed_rows_mut::<3>(V).copy_from(&(x.v - reference.v));
    d.fixed_rows_mut::<3>(W).copy_from(&(x.w - reference.w));
    d
}

/// Jacobians of `dynamics_step` in error coordinates.
pub fn linearize_dynamics(x: &ToolState, u: &Control, dt: f64) -> (MatXX, MatXU) {
    let phi = (x.w + u.u_w * dt) * dt;
    let jr = so3::right_jacobian(&phi);
    let i3 = Matrix3::identity();
    let mut a = MatXX::identity();
    a.fixed_view_mut::<3, 3>(P, V).copy_from(&(i3 * dt));
    a.fixed_view_mut::<3, 3>(TH, TH).copy_from(&so3::exp(&phi).transpose());
    a.fixed_view_mut::<3, 3>(TH, W).copy_from(&(jr * dt));
    let mut b = MatXU::zeros();
    b.fixed_view_mut::<3, 3>(P, 0).copy_from(&(i3 * (dt * dt)));
    b.fixed_view_mut::<3, 3>(V, 0).copy_from(&(i3 * dt));
    b.fixed_view_mut::<3, 3>(TH, 3).copy_from(&(jr * (dt * dt)));
    b.fixed_view_mut::<3, 3>(W, 3).copy_from(&(i3 * dt));
    (a, b)
}

// ---------------------------------------------------------------------------
// Remote-center residual.

/// Component of `p_s - p` orthogonal to the shaft, in the basis given by
/// the first two columns of `R`.
pub fn scleral_residual(x: &ToolState, p_s: &Vector3<f64>) -> Vector2<f64> {
    let d_b = x.r.transpose() * (p_s - x.p);
    Vector2::new(d_b[0], d_b[1])
}

/// `(w/2)‖residual‖²` with its gradient and Hessian in error coordinates.
pub fn sclera_penalty(x: &ToolState, p_s: &Vector3<f64>, w: f64) -> (f64, StateVec, MatXX) {
    let mut grad = StateVec::zeros();
    let mut hess = MatXX::zeros();
    if w == 0.0 {
        return (0.0, grad, hess);
    }
    let d = p_s - x.p;
    let axis = x.shaft_axis();
    let d_b = x.r.transpose() * d;
    let s = axis.dot(&d);
    let e3 = Vector3::z();
    let ds_dth = e3.cross(&d_b);
    let f = 0.5 * w * (d_b[0] * d_b[0] + d_b[1] * d_b[1]);

    grad.fixed_rows_mut::<3>(P).copy_from(&((-d + axis * s) * w));
    grad.fixed_rows_mut::<3>(TH).copy_from(&(ds_dth * (-w * s)));

    let hpp = (Matrix3::identity() - axis * axis.transpose()) * w;
    let hpt = (axis * ds_dth.transpose() - x.r * so3::hat(&e3) * s) * w;
    let sym = (d_b * e3.transpose() + e3 * d_b.transpose()) * 0.5;
    let d2s = sym - Matrix3::identity() * s;
    let htt = (-(ds_dth * ds_dth.transpose()) - d2s * s) * w;
    hess.fixed_view_mut::<3, 3>(P, P).copy_from(&hpp);
    hess.fixed_view_mut::<3, 3>(P, TH).copy_from(&hpt);
    hess.fixed_view_mut::<3, 3>(TH, P).copy_from(&hpt.transpose());
    hess.fixed_view_mut::<3, 3>(TH, TH).copy_from(&htt);
    (f, grad, hess)
}

// ---------------------------------------------------------------------------
// Cost pieces.

fn running_control_cost(u: &ControlVec, w: &CostWeights, dt: f64) -> (f64, ControlVec, MatUU) {
    let mut diag = ControlVec::zeros();
    for i in 0..3 {
        diag[i] = w.r_v * dt;
        diag[i + 3] = w.r_w * dt;
    }
    let grad = diag.component_mul(u);
    let cost = 0.5 * u.dot(&grad);
    (cost, grad, MatUU::from_diagonal(&diag))
}

fn terminal_cost(x: &ToolState, prob: &OCProblem) -> (f64, StateVec, MatXX) {
    let w = &prob.weights;
    let e = x.p - prob.goal;
    let cost = 0.5 * (w.q_pos * e.norm_squared() + w.q_vel * x.v.norm_squared() + w.q_omega * x.w.norm_squared());
    let mut grad = StateVec::zeros();
    grad.fixed_rows_mut::<3>(P).copy_from(&(e * w.q_pos));
    grad.fixed_rows_mut::<3>(V).copy_from(&(x.v * w.q_vel));
    grad.fixed_rows_mut::<3>(W).copy_from(&(x.w * w.q_omega));
    let mut hess = MatXX::zeros();
    for i in 0..3 {
        hess[(P + i, P + i)] = w.q_pos;
        hess[(V + i, V + i)] = w.q_vel;
        hess[(W + i, W + i)] = w.q_omega;
    }
    (cost, grad, hess)
}

/// Augmented-Lagrangian term `(1/2ρ)(max(0, λ + ρg)² - λ²)` on the
/// clearance margin, with derivatives in error coordinates.
fn chance_al(x: &ToolState, spec: &ChanceSpec, lambda: f64, rho: f64) -> (f64, f64, StateVec, MatXX) {
    let (g, dg, d2g) = spec.evaluate(&x.p);
    let mut grad = StateVec::zeros();
    let mut hess = MatXX::zeros();
    let shifted = lambda + rho * g;
    if shifted <= 0.0 {
        return (-lambda * lambda / (2.0 * rho), g, grad, hess);
    }
    let cost = (shifted * shifted - lambda * lambda) / (2.0 * rho);
    grad.fixed_rows_mut::<3>(P).copy_from(&(dg * shifted));
    let h = dg * dg.transpose() * rho + d2g * shifted;
    hess.fixed_view_mut::<3, 3>(P, P).copy_from(&h);
    (cost, g, grad, hess)
}

/// Plain objective (no multiplier terms): control effort, shaft penalty at
/// every knot, terminal cost.
pub fn objective(traj: &Trajectory, prob: &OCProblem) -> f64 {
    let mut total = 0.0;
    for (k, x) in traj.states.iter().enumerate() {
        total += sclera_penalty(x, &prob.incision, prob.weights.w_sclera).0;
        if k < traj.controls.len() {
            total += running_control_cost(&traj.controls[k].to_vec(), &prob.weights, prob.dt).0;
        }
    }
    total + terminal_cost(traj.states.last().unwrap(), prob).0
}

struct Multipliers {
    lambda: Vec<f64>,
    rho: f64,
}

fn augmented_cost(traj: &Trajectory, prob: &OCProblem, mult: &Multipliers) -> f64 {
    let mut total = objective(traj, prob);
    if let Some(spec) = &prob.chance {
        for (k, x) in traj.states.iter().enumerate().skip(1) {
            total += chance_al(x, spec, mult.lambda[k], mult.rho).0;
        }
    }
    total
}

struct Gains {
    k_ff: Vec<ControlVec>,
    k_fb: Vec<MatUX>,
    expected: (f64, f64),
}

fn backward_pass(traj: &Trajectory, prob: &OCProblem, mult: &Multipliers, mu: f64) -> Option<Gains> {
    let n = traj.controls.len();
    let xn = &traj.states[n];
    let (_, mut vx, mut vxx) = terminal_cost(xn, prob);
    let (_, gs, hs) = sclera_penalty(xn, &prob.incision, prob.weights.w_sclera);
    vx += gs;
    vxx += hs;
    if let Some(spec) = &prob.chance {
        let (_, _, gc, hc) = chance_al(xn, spec, mult.lambda[n], mult.rho);
        vx += gc;
        vxx += hc;
    }

    let mut k_ff = vec![ControlVec::zeros(); n];
    let mut k_fb = vec![MatUX::zeros(); n];
    let mut expected = (0.0, 0.0);

    for k in (0..n).rev() {
        let x = &traj.states[k];
        let u = traj.controls[k];
        let (a, b) = linearize_dynamics(x, &u, prob.dt);
        let (_, mut lx, mut lxx) = sclera_penalty(x, &prob.incision, prob.weights.w_sclera);
        if k > 0 {
            if let Some(spec) = &prob.chance {
                let (_, _, gc, hc) = chance_al(x, spec, mult.lambda[k], mult.rho);
                lx += gc;
                lxx += hc;
            }
        }
        let (_, lu, luu) = running_control_cost(&u.to_vec(), &prob.weights, prob.dt);

        let qx = lx + a.transpose() * vx;
        let qu = lu + b.transpose() * vx;
        let qxx = lxx + a.transpose() * vxx * a;
        let quu = luu + b.transpose() * vxx * b;
        let qux = b.transpose() * vxx * a;
        let quu_reg = quu + MatUU::identity() * mu;
        let chol = ((quu_reg + quu_reg.transpose()) * 0.5).cholesky()?;
        let kff = -chol.solve(&qu);
        let kfb = -chol.solve(&qux);

        expected.0 += kff.dot(&qu);
        expected.1 += 0.5 * kff.dot(&(quu * kff));

        vx = qx + kfb.transpose() * quu * kff + kfb.transpose() * qu + qux.transpose() * kff;
        vxx = qxx + kfb.transpose() * quu * kfb + kfb.transpose() * qux + qux.transpose() * kfb;
        vxx = (vxx + vxx.transpose()) * 0.5;
        k_ff[k] = kff;
        k_fb[k] = kfb;
    }
    Some(Gains { k_ff, k_fb, expected })
}

fn forward_pass(traj: &Trajectory, gains: &Gains, step: f64, dt: f64) -> Trajectory {
    let n = traj.controls.len();
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    states.push(traj.states[0]);
    for k in 0..n {
        let x = states[k];
        let dx = state_difference(&x, &traj.states[k]);
        let u = traj.controls[k].to_vec() + gains.k_ff[k] * step + gains.k_fb[k] * dx;
        let uc = Control::from_vec(&u);
        states.push(dynamics_step(&x, &uc, dt));
        controls.push(uc);
    }
    Trajectory { states, controls, dt }
}

enum InnerOutcome {
    Converged,
    IterationLimit,
    Stalled,
}

fn inner_solve(traj: &mut Trajectory, prob: &OCProblem, mult: &Multipliers, iterations: &mut usize) -> InnerOutcome {
    let s = &prob.settings;
    let mut mu = s.mu_init;
    let mut cost = augmented_cost(traj, prob, mult);
    for _ in 0..s.max_inner {
        *iterations += 1;
        let gains = loop {
            match backward_pass(traj, prob, mult, mu) {
                Some(g) => break Some(g),
                None => {
                    mu *= 10.0;
                    if mu > s.mu_max {
                        break None;
                    }
                }
            }
        };
        let Some(gains) = gains else {
            return InnerOutcome::Stalled;
        };

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..s.line_search_trials {
            let cand = forward_pass(traj, &gains, step, prob.dt);
            let c = augmented_cost(&cand, prob, mult);
            if c.is_finite() && c < cost {
                accepted = Some((cand, c));
                break;
            }
            step *= s.line_search_factor;
        }

        match accepted {
            Some((cand, c)) => {
                let decrease = cost - c;
                *traj = cand;
                cost = c;
                mu = (mu / 10.0).max(s.mu_init);
                if decrease <= s.tolerance * (1.0 + cost.abs()) {
                    return InnerOutcome::Converged;
                }
            }
            None => {
                let predicted = -(gains.expected.0 + gains.expected.1);
                if predicted <= s.tolerance * (1.0 + cost.abs()) {
                    return InnerOutcome::Converged;
                }
                mu *= 10.0;
                if mu > s.mu_max {
                    return InnerOutcome::Stalled;
                }
            }
        }
    }
    InnerOutcome::IterationLimit
}

/// Solves the problem from `prob.x0`, optionally warm-started with a control
/// sequence (padded with zeros or truncated to the horizon).
pub fn solve(prob: &OCProblem, warm_start: Option<&Trajectory>) -> Result<Solution, DdpError> {
    prob.validate()?;
    if let Some(spec) = &prob.chance {
        let g0 = spec.evaluate(&prob.x0.p).0;
        if g0 > START_MARGIN_SLACK {
            return Err(DdpError::InfeasibleStart(g0));
        }
    }
    let n = prob.n_steps;
    let mut controls: Vec<Control> = warm_start.map(|t| t.controls.clone()).unwrap_or_default();
    controls.resize(n, Control::default());
    let mut traj = Trajectory::rollout(prob.x0, controls, prob.dt);

    let s = prob.settings;
    let mut mult = Multipliers {
        lambda: vec![0.0; n + 1],
        rho: s.penalty_init,
    };
    let mut iterations = 0;
    let mut stalled = false;
    let mut inner_ok = false;

    for _ in 0..s.max_outer.max(1) {
        match inner_solve(&mut traj, prob, &mult, &mut iterations) {
            InnerOutcome::Converged => inner_ok = true,
            InnerOutcome::IterationLimit => inner_ok = false,
            InnerOutcome::Stalled => {
                stalled = true;
                inner_ok = false;
            }
        }
        let Some(spec) = &prob.chance else { break };
        let margins: Vec<f64> = traj.states.iter().map(|x| spec.evaluate(&x.p).0).collect();
        let gmax = margins.iter().skip(1).cloned().fold(f64::NEG_INFINITY, f64::max);
        if gmax <= s.feasibility_tol && inner_ok {
            break;
        }
        if stalled {
            break;
        }
        for (lambda, g) in mult.lambda.iter_mut().zip(&margins).skip(1) {
            *lambda = (*lambda + mult.rho * g).max(0.0);
        }
        mult.rho = (mult.rho * s.penalty_factor).min(s.penalty_max);
    }

    let mut report = check_trajectory(&traj, prob);
    report.iterations = iterations;
    report.converged = report.converged && inner_ok && !stalled;
    let sol = Solution { trajectory: traj, report };
    if stalled {
        return Err(DdpError::Stalled(Box::new(sol)));
    }
    Ok(sol)
}

/// Independent audit of a trajectory: dynamics consistency, objective,
/// shaft residual and clearance margin recomputed from scratch.
pub fn check_trajectory(traj: &Trajectory, prob: &OCProblem) -> SolverReport {
    let mut defect: f64 = 0.0;
    for (k, u) in traj.controls.iter().enumerate() {
        let next = dynamics_step(&traj.states[k], u, prob.dt);
        let d = state_difference(&traj.states[k + 1], &next);
        defect = defect.max(d.amax());
    }
    if traj.states.len() != traj.controls.len() + 1 {
        defect = f64::INFINITY;
    }
    let max_res = traj
        .states
        .iter()
        .map(|x| scleral_residual(x, &prob.incision).norm())
        .fold(0.0, f64::max);
    let max_margin = match &prob.chance {
        Some(spec) => traj
            .states
            .iter()
            .skip(1)
            .map(|x| spec.evaluate(&x.p).0)
            .fold(f64::NEG_INFINITY, f64::max),
        None => f64::NEG_INFINITY,
    };
    let consistent = defect <= 1e-9;
    SolverReport {
        iterations: 0,
        final_cost: objective(traj, prob),
        max_scleral_residual: max_res,
        max_chance_margin: max_margin,
        max_dynamics_defect: defect,
        converged: consistent && max_res < 1e-3 && max_margin <= 1e-8,
    }
}
