//! Independent oracles shared by the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, SMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use retina_nav::chance::{margin_at, CovarianceStructure, Matrix9, Vector9};
use retina_nav::ddp::{
    linearize_dynamics, retract, sclera_penalty, state_difference, dynamics_step, Control, CostWeights, OCProblem,
    StateVec, NX, NU,
};
use retina_nav::geometry::{lower_to_s, s_to_lower, EllipsoidEstimate, SamplePoint};
use retina_nav::so3;
use retina_nav::{OracleConfig, ToolState};

pub fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let v = Vector3::from(z);
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

pub fn surface_samples(center: Vector3<f64>, axes: Vector3<f64>, rot: Matrix3<f64>, n: usize, seed: u64) -> Vec<SamplePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| SamplePoint {
            position: center + rot * unit_vector(&mut rng).component_mul(&axes),
            sigma: 0.05,
        })
        .collect()
}

/// Retina-like samples over the lower half of a random ellipsoid (semi-axes
/// 10-13 mm) centered on the nominal eye, perturbed by the distance-3 mm
/// noise of the default oracle table and quantized to its bins.
pub fn noisy_hemisphere(seed: u64) -> Vec<SamplePoint> {
    let cfg = OracleConfig::default();
    let sigma = cfg.sigma_at(3.0);
    let weight = cfg.scalar_sigma_at(3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let axes = Vector3::new(rng.random_range(10.0..13.0), rng.random_range(10.0..13.0), rng.random_range(10.0..13.0));
    let rot = so3::exp(&(unit_vector(&mut rng) * rng.random_range(0.0..0.3)));
    (0..200)
        .map(|_| {
            let mut u = unit_vector(&mut rng);
            u[2] = -u[2].abs();
            let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let noise = sigma.component_mul(&Vector3::from(z));
            SamplePoint {
                position: (rot * u.component_mul(&axes) + noise).map(|v| cfg.quantize(v)),
                sigma: weight,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Chance constraint.

pub fn random_estimate(rng: &mut ChaCha8Rng) -> EllipsoidEstimate {
    let axes = Vector3::new(rng.random_range(10.0..13.0), rng.random_range(10.0..13.0), rng.random_range(10.0..13.0));
    let rot = so3::exp(&Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)));
    let shape = rot * Matrix3::from_diagonal(&axes.map(|a| 1.0 / (a * a))) * rot.transpose();
    let center = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    EllipsoidEstimate::from_center_shape(center, &shape, 200).unwrap()
}

/// Random SPD covariance of `(p_c, S)`: center std 0.01-0.1 mm, each
/// Cholesky entry std 0.1-1 % of the mean diagonal, random correlations.
pub fn random_sigma(rng: &mut ChaCha8Rng, est: &EllipsoidEstimate) -> Matrix9 {
    let b = SMatrix::<f64, 9, 9>::from_fn(|_, _| StandardNormal.sample(rng));
    let c = b * b.transpose() + Matrix9::identity() * 0.5;
    let d = Vector9::from_fn(|i, _| c[(i, i)].sqrt());
    let scale_s = est.l.diagonal().mean();
    let std = Vector9::from_fn(|i, _| {
        if i < 3 {
            rng.random_range(0.01..0.1)
        } else {
            scale_s * rng.random_range(0.001..0.01)
        }
    });
    Matrix9::from_fn(|i, j| c[(i, j)] / (d[i] * d[j]) * std[i] * std[j])
}

/// Point on the ray from the center along `dir` where the margin crosses
/// zero (on its non-positive side), found by bisection.
pub fn boundary_point(est: &EllipsoidEstimate, dir: &Vector3<f64>, alpha: f64) -> Vector3<f64> {
    let g = |t: f64| margin_at(&(est.p_c + dir * t), est, alpha, CovarianceStructure::Joint).unwrap().g;
    let (mut lo, mut hi) = (1.0, 20.0);
    assert!(g(lo) < 0.0 && g(hi) > 0.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    est.p_c + dir * lo
}

/// Fraction of parameter draws `(p_c, S) ~ N(ŷ, Σ)` for which `p` lies
/// inside the drawn ellipsoid.
pub fn inclusion_frequency(p: &Vector3<f64>, est: &EllipsoidEstimate, draws: usize, rng: &mut ChaCha8Rng) -> f64 {
    let chol = est.cov_joint.cholesky().expect("SPD covariance");
    let mut y_hat = Vector9::zeros();
    y_hat.fixed_rows_mut::<3>(0).copy_from(&est.p_c);
    y_hat.fixed_rows_mut::<6>(3).copy_from(&lower_to_s(&est.l));
    let mut inside = 0usize;
    for _ in 0..draws {
        let z = Vector9::from_fn(|_, _| StandardNormal.sample(rng));
        let y = y_hat + chol.l() * z;
        let pc = Vector3::new(y[0], y[1], y[2]);
        let l = s_to_lower(&y.fixed_rows::<6>(3).into_owned());
        if (l.transpose() * (p - pc)).norm_squared() <= 1.0 {
            inside += 1;
        }
    }
    inside as f64 / draws as f64
}

// ---------------------------------------------------------------------------
// Solver derivatives.

fn rel_err<const R: usize, const C: usize>(a: &SMatrix<f64, R, C>, b: &SMatrix<f64, R, C>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-12)
}

pub fn random_tool(rng: &mut ChaCha8Rng) -> ToolState {
    let pivot = Vector3::new(9.5, 0.0, 8.0);
    let tip = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-10.0..-6.0));
    let mut x = ToolState::through_pivot(tip, pivot);
    x.r *= so3::exp(&(unit_vector(rng) * 0.05));
    x.v = unit_vector(rng) * rng.random_range(0.0..0.5);
    x.w = unit_vector(rng) * rng.random_range(0.0..0.3);
    x
}

/// Largest relative error of the dynamics Jacobians against central
/// differences through the retraction.
pub fn dynamics_jacobian_error(samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / 15.0;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x = random_tool(&mut rng);
        let u = Control {
            u_v: unit_vector(&mut rng) * 0.5,
            u_w: unit_vector(&mut rng) * 0.5,
        };
        let (a, b) = linearize_dynamics(&x, &u, dt);
        let nominal = dynamics_step(&x, &u, dt);
        let mut fa = SMatrix::<f64, NX, NX>::zeros();
        for j in 0..NX {
            let e = StateVec::ith(j, h);
            let plus = state_difference(&dynamics_step(&retract(&x, &e), &u, dt), &nominal);
            let minus = state_difference(&dynamics_step(&retract(&x, &(-e)), &u, dt), &nominal);
            fa.set_column(j, &((plus - minus) / (2.0 * h)));
        }
        let mut fb = SMatrix::<f64, NX, NU>::zeros();
        for j in 0..NU {
            let mut du = u.to_vec();
            du[j] += h;
            let plus = state_difference(&dynamics_step(&x, &Control::from_vec(&du), dt), &nominal);
            du[j] -= 2.0 * h;
            let minus = state_difference(&dynamics_step(&x, &Control::from_vec(&du), dt), &nominal);
            fb.set_column(j, &((plus - minus) / (2.0 * h)));
        }
        worst = worst.max(rel_err(&a, &fa)).max(rel_err(&b, &fb));
    }
    worst
}

/// Largest relative error of the shaft-penalty gradient and Hessian.
pub fn sclera_derivative_error(samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = 1e4;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x = random_tool(&mut rng);
        let p_s = Vector3::new(9.5, 0.0, 8.0) + unit_vector(&mut rng) * 0.3;
        let (_, grad, hess) = sclera_penalty(&x, &p_s, w);
        let f = |dx: &StateVec| sclera_penalty(&retract(&x, dx), &p_s, w).0;
        let h = 1e-6;
        let mut fg = StateVec::zeros();
        for j in 0..NX {
            let e = StateVec::ith(j, h);
            fg[j] = (f(&e) - f(&(-e))) / (2.0 * h);
        }
        let hh = 1e-4;
        let mut fh = SMatrix::<f64, NX, NX>::zeros();
        for i in 0..NX {
            for j in 0..NX {
                let ei = StateVec::ith(i, hh);
                let ej = StateVec::ith(j, hh);
                fh[(i, j)] = (f(&(ei + ej)) - f(&(ei - ej)) - f(&(ej - ei)) + f(&(-ei - ej))) / (4.0 * hh * hh);
            }
        }
        worst = worst.max(rel_err(&grad, &fg)).max(rel_err(&hess, &fh));
    }
    worst
}

/// Largest relative error of the chance-margin gradient and Hessian.
pub fn margin_derivative_error(samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let est = random_estimate(&mut rng);
        let est = est.clone().with_covariance(random_sigma(&mut rng, &est));
        let p = est.p_c + Vector3::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(-11.0..-6.0));
        let m = margin_at(&p, &est, 0.99, CovarianceStructure::Joint).unwrap();
        let h = 1e-5;
        let mut fg = Vector3::zeros();
        let mut fh = Matrix3::zeros();
        for i in 0..3 {
            let e = Vector3::ith(i, h);
            let plus = margin_at(&(p + e), &est, 0.99, CovarianceStructure::Joint).unwrap();
            let minus = margin_at(&(p - e), &est, 0.99, CovarianceStructure::Joint).unwrap();
            fg[i] = (plus.g - minus.g) / (2.0 * h);
            fh.set_column(i, &((plus.gradient_p - minus.gradient_p) / (2.0 * h)));
        }
        worst = worst.max(rel_err(&m.gradient_p, &fg)).max(rel_err(&m.hessian_p, &fh));
    }
    worst
}

// ---------------------------------------------------------------------------
// Trajectory oracle.

/// Independent restatement of the tool dynamics and objective, optimized by
/// single-shooting BFGS over the stacked controls.
/// Position, rotation, velocity and angular velocity at one knot.
pub type OracleState = (Vector3<f64>, Matrix3<f64>, Vector3<f64>, Vector3<f64>);

pub struct ShootingOracle<'a> {
    pub x0: ToolState,
    pub goal: Vector3<f64>,
    pub incision: Vector3<f64>,
    pub weights: &'a CostWeights,
    pub dt: f64,
    pub n: usize,
}

impl ShootingOracle<'_> {
    pub fn from_problem(prob: &OCProblem) -> ShootingOracle<'_> {
        ShootingOracle {
            x0: prob.x0,
            goal: prob.goal,
            incision: prob.incision,
            weights: &prob.weights,
            dt: prob.dt,
            n: prob.n_steps,
        }
    }

    pub fn rollout(&self, u: &DVector<f64>) -> Vec<OracleState> {
        let (mut p, mut r, mut v, mut w) = (self.x0.p, self.x0.r, self.x0.v, self.x0.w);
        let mut out = vec![(p, r, v, w)];
        for k in 0..self.n {
            let uv = Vector3::new(u[6 * k], u[6 * k + 1], u[6 * k + 2]);
            let uw = Vector3::new(u[6 * k + 3], u[6 * k + 4], u[6 * k + 5]);
            v += uv * self.dt;
            p += v * self.dt;
            w += uw * self.dt;
            r *= Rotation3::from_scaled_axis(w * self.dt).into_inner();
            out.push((p, r, v, w));
        }
        out
    }

    pub fn cost(&self, u: &DVector<f64>) -> f64 {
        let wt = self.weights;
        let states = self.rollout(u);
        let mut total = 0.0;
        for (p, r, _, _) in &states {
            let d = self.incision - p;
            let axis = r.column(2).into_owned();
            let perp = d - axis * axis.dot(&d);
            total += 0.5 * wt.w_sclera * perp.norm_squared();
        }
        for k in 0..self.n {
            let uv = Vector3::new(u[6 * k], u[6 * k + 1], u[6 * k + 2]);
            let uw = Vector3::new(u[6 * k + 3], u[6 * k + 4], u[6 * k + 5]);
            total += 0.5 * self.dt * (wt.r_v * uv.norm_squared() + wt.r_w * uw.norm_squared());
        }
        let (p, _, v, w) = states[self.n];
        total + 0.5 * (wt.q_pos * (p - self.goal).norm_squared() + wt.q_vel * v.norm_squared() + wt.q_omega * w.norm_squared())
    }

    fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        let h = 1e-7;
        DVector::from_fn(u.len(), |i, _| {
            let mut a = u.clone();
            a[i] += h;
            let mut b = u.clone();
            b[i] -= h;
            (self.cost(&a) - self.cost(&b)) / (2.0 * h)
        })
    }

    /// BFGS with backtracking; returns the optimal controls.
    pub fn solve(&self) -> DVector<f64> {
        let m = 6 * self.n;
        let mut u = DVector::zeros(m);
        let mut g = self.gradient(&u);
        let mut hinv = DMatrix::identity(m, m) * 1e-3;
        let mut f = self.cost(&u);
        for _ in 0..2000 {
            if g.norm() < 1e-9 {
                break;
            }
            let dir = -(&hinv * &g);
            let mut step = 1.0;
            let mut next = &u + &dir * step;
            let mut fnext = self.cost(&next);
            while fnext > f + 1e-4 * step * g.dot(&dir) && step > 1e-12 {
                step *= 0.5;
                next = &u + &dir * step;
                fnext = self.cost(&next);
            }
            let gnext = self.gradient(&next);
            let s = &next - &u;
            let y = &gnext - &g;
            let sy = s.dot(&y);
            if sy > 1e-300 {
                let rho = 1.0 / sy;
                let i = DMatrix::<f64>::identity(m, m);
                let left = &i - &s * y.transpose() * rho;
                let right = &i - &y * s.transpose() * rho;
                hinv = &left * &hinv * &right + &s * s.transpose() * rho;
            }
            u = next;
            g = gnext;
            f = fnext;
        }
        u
    }
}

// ---------------------------------------------------------------------------
// Optical flow.

/// Frames before and after a rigid eye drift, with the true image shift of
/// the fundus. The tool is parked outside the field of view unless
/// `tool_in_view` is set, in which case its tip hovers over the center.
pub fn drift_pair(drift: nalgebra::Vector2<f64>, tool_in_view: bool) -> (retina_nav::image::GrayImage, retina_nav::image::GrayImage, nalgebra::Vector2<f64>) {
    use retina_nav::phantom::render_topdown;
    let cfg = retina_nav::PhantomConfig {
        drift_range_mm: 0.5,
        ..Default::default()
    };
    let mut phantom = cfg.phantom().unwrap();
    let cam = cfg.camera;
    let tip = if tool_in_view { Vector3::new(0.0, 0.0, -10.0) } else { Vector3::new(7.6, 0.0, -6.0) };
    let tool = ToolState::through_pivot(tip, phantom.incision_point);
    let before = render_topdown(&phantom, &tool, &cam, 0.0).image;
    phantom.apply_drift(drift).unwrap();
    let after = render_topdown(&phantom, &tool, &cam, 0.0).image;
    let expected = cam.world_to_px(&Vector3::new(drift[0], drift[1], 0.0)) - cam.world_to_px(&Vector3::zeros());
    (before, after, expected)
}

/// Global-shift error, in pixels, over a grid of drifts up to `max_mm` per axis.
pub fn worst_flow_error(max_mm: f64, steps: usize, tool_in_view: bool) -> f64 {
    use retina_nav::flow::{track_frames, CornerParams, CropSpec, LkParams};
    let mut worst: f64 = 0.0;
    for i in 0..=steps {
        for j in 0..=steps {
            let d = nalgebra::Vector2::new(
                -max_mm + 2.0 * max_mm * i as f64 / steps as f64,
                -max_mm + 2.0 * max_mm * j as f64 / steps as f64,
            );
            let (a, b, expected) = drift_pair(d, tool_in_view);
            let shift = track_frames(&a, &b, &CropSpec::default(), &CornerParams::default(), &LkParams::default())
                .map(|r| r.global_shift)
                .unwrap_or(nalgebra::Vector2::repeat(f64::INFINITY));
            worst = worst.max((shift - expected).norm());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Solver scenarios.

pub const PIVOT: Vector3<f64> = Vector3::new(9.5, 0.0, 8.0);

/// Largest pathwise tip distance between the solver and the shooting
/// oracle on a 10-step problem.
pub fn compare_with_oracle(w_sclera: f64) -> f64 {
    let x0 = ToolState::through_pivot(Vector3::new(0.0, 0.0, -8.0), PIVOT);
    let mut prob = OCProblem::new(x0, x0.p + Vector3::new(0.4, 0.3, -0.5), PIVOT);
    prob.n_steps = 10;
    prob.dt = 0.1;
    prob.weights.w_sclera = w_sclera;
    prob.weights.q_pos = 1e2;
    prob.weights.q_vel = 1.0;
    prob.weights.q_omega = 1.0;
    let sol = retina_nav::ddp::solve(&prob, None).unwrap();
    let oracle = ShootingOracle::from_problem(&prob);
    let u = oracle.solve();
    let states = oracle.rollout(&u);
    let ours = DVector::from_iterator(60, sol.trajectory.controls.iter().flat_map(|c| c.to_vec().iter().copied().collect::<Vec<_>>()));
    assert!(oracle.cost(&u) >= oracle.cost(&ours) - 1e-9 * oracle.cost(&u).abs().max(1.0));
    states
        .iter()
        .zip(&sol.trajectory.states)
        .map(|(o, x)| (o.0 - x.p).norm())
        .fold(0.0, f64::max)
}

/// Goal 0.2 mm above a 12 mm sphere whose center is uncertain by 0.1 mm,
/// so the clearance bound keeps the tip short of it.
pub fn chance_problem() -> OCProblem {
    let est = EllipsoidEstimate::from_center_shape(Vector3::zeros(), &(Matrix3::identity() / 144.0), 200).unwrap();
    let mut sigma = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..3 {
        sigma[(i, i)] = 0.01;
    }
    for i in 3..9 {
        sigma[(i, i)] = (1e-3 / 12.0f64).powi(2);
    }
    let est = est.with_covariance(sigma);
    let x0 = ToolState::through_pivot(Vector3::new(0.5, 0.0, -10.0), PIVOT);
    let mut prob = OCProblem::new(x0, Vector3::new(0.0, 0.0, -11.8), PIVOT);
    prob.chance = Some(retina_nav::ddp::ChanceSpec {
        estimate: est,
        alpha: 0.99,
        structure: CovarianceStructure::Joint,
    });
    prob
}

