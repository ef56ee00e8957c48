//! Local retinal geometry as an ellipsoid: regularized, weighted,
//! ellipsoid-specific least squares on oracle-derived surface samples, plus
//! the Monte-Carlo covariance of the fitted parameters.
//!
//! Quadric convention: `v = (a, b, c, f, g, h, p, q, r, d)` describes
//! `a x² + b y² + c z² + 2f yz + 2g xz + 2h xy + 2p x + 2q y + 2r z + d = 0`.

use nalgebra::{DMatrix, Matrix3, Matrix4, Matrix6, SMatrix, SVector, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phantom::{CameraModel, DepthOracle, EyePhantom, SimError};

pub type Vector10 = SVector<f64, 10>;
type Matrix6x4 = SMatrix<f64, 6, 4>;
type Matrix4x6 = SMatrix<f64, 4, 6>;

/// Ellipsoid-specificity parameter in `kJ - I² = 1`.
pub const K_SPECIFICITY: f64 = 4.0;

/// Column-major order of the free entries of a lower-triangular 3×3 factor.
pub const LOWER_INDICES: [(usize, usize); 6] = [(0, 0), (1, 0), (2, 0), (1, 1), (2, 1), (2, 2)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("fit not elliptic")]
    FitNotElliptic,
    #[error("samples degenerate")]
    SamplesDegenerate,
    #[error("goal too close to retina boundary")]
    GoalNearBoundary,
    #[error("ray undefined")]
    RayUndefined,
    #[error("at least {needed} {what} required, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub position: Vector3<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizationPrior {
    pub center0: Vector3<f64>,
    pub radius0: f64,
    pub lambda: f64,
}

impl RegularizationPrior {
    pub fn none() -> Self {
        Self {
            center0: Vector3::zeros(),
            radius0: 1.0,
            lambda: 0.0,
        }
    }

    /// Coefficients of `|x - c0|² - r0²` in the quadric convention.
    pub fn sphere_vector(&self) -> Vector10 {
        let c = self.center0;
        Vector10::from_column_slice(&[
            1.0,
            1.0,
            1.0,
            0.0,
            0.0,
            0.0,
            -c[0],
            -c[1],
            -c[2],
            c.norm_squared() - self.radius0 * self.radius0,
        ])
    }
}

/// Fitted ellipsoid `(x - p_c)ᵀ L Lᵀ (x - p_c) = 1` and its uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidEstimate {
    pub p_c: Vector3<f64>,
    pub l: Matrix3<f64>,
    /// Coefficients of the estimated surface, scaled so that `4J - I² = 1`.
    pub quadric_vector: Vector10,
    pub cov_center: Matrix3<f64>,
    pub cov_l: Matrix6<f64>,
    /// Joint covariance of `[p_c; S]`.
    pub cov_joint: SMatrix<f64, 9, 9>,
    pub n_samples: usize,
}

impl EllipsoidEstimate {
    /// Builds an estimate with zero covariance from a center and a shape
    /// matrix `A` (surface `(x - p_c)ᵀ A (x - p_c) = 1`).
    pub fn from_center_shape(p_c: Vector3<f64>, shape: &Matrix3<f64>, n_samples: usize) -> Result<Self, GeometryError> {
        let sym = (shape + shape.transpose()) * 0.5;
        let chol = sym.cholesky().ok_or(GeometryError::FitNotElliptic)?;
        Ok(Self::from_center_factor(p_c, chol.l(), n_samples))
    }

    pub fn from_center_factor(p_c: Vector3<f64>, l: Matrix3<f64>, n_samples: usize) -> Self {
        let a = l * l.transpose();
        let b = -(a * p_c);
        let d = p_c.dot(&(a * p_c)) - 1.0;
        let v = normalize_quadric(&quadric_from_parts(&a, &b, d));
        Self {
            p_c,
            l,
            quadric_vector: v,
            cov_center: Matrix3::zeros(),
            cov_l: Matrix6::zeros(),
            cov_joint: SMatrix::zeros(),
            n_samples,
        }
    }

    pub fn sphere(center: Vector3<f64>, radius: f64) -> Self {
        Self::from_center_factor(center, Matrix3::identity() / radius, 0)
    }

    pub fn shape(&self) -> Matrix3<f64> {
        self.l * self.l.transpose()
    }

    /// Free entries of `L` stacked column-major over the lower triangle.
    pub fn s_vector(&self) -> Vector6<f64> {
        lower_to_s(&self.l)
    }

    pub fn with_covariance(mut self, joint: SMatrix<f64, 9, 9>) -> Self {
        let joint = (joint + joint.transpose()) * 0.5;
        self.cov_center = joint.fixed_view::<3, 3>(0, 0).into_owned();
        self.cov_l = joint.fixed_view::<6, 6>(3, 3).into_owned();
        self.cov_joint = joint;
        self
    }

    /// `(x - p_c)ᵀ L Lᵀ (x - p_c)`; equals 1 on the surface, < 1 inside.
    pub fn level(&self, x: &Vector3<f64>) -> f64 {
        let w = self.l.transpose() * (x - self.p_c);
        w.norm_squared()
    }

    /// Principal semi-axes, ascending.
    pub fn semi_axes(&self) -> Vector3<f64> {
        let eig = self.shape().symmetric_eigen();
        let mut axes: Vec<f64> = eig.eigenvalues.iter().map(|e| 1.0 / e.max(1e-300).sqrt()).collect();
        axes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Vector3::new(axes[0], axes[1], axes[2])
    }

    /// Outward unit normal of the level set through `x`.
    pub fn outward_normal(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let g = self.shape() * (x - self.p_c);
        let n = g.norm();
        if n > 0.0 {
            g / n
        } else {
            Vector3::z()
        }
    }

    /// Rigidly shifted copy; the covariance is unchanged.
    pub fn translated(&self, shift: &Vector3<f64>) -> Self {
        let mut out = Self::from_center_factor(self.p_c + shift, self.l, self.n_samples);
        out.cov_center = self.cov_center;
        out.cov_l = self.cov_l;
        out.cov_joint = self.cov_joint;
        out
    }

    /// Same center and orientation with every semi-axis reduced by `delta`
    /// (exact for spheres, a first-order inset otherwise).
    pub fn inset(&self, delta: f64) -> Result<Self, GeometryError> {
        let eig = self.shape().symmetric_eigen();
        let mut lambdas = eig.eigenvalues;
        for e in lambdas.iter_mut() {
            let axis = 1.0 / e.sqrt() - delta;
            if !(axis > 0.0) {
                return Err(GeometryError::FitNotElliptic);
            }
            *e = 1.0 / (axis * axis);
        }
        let shape = eig.eigenvectors * Matrix3::from_diagonal(&lambdas) * eig.eigenvectors.transpose();
        let mut out = Self::from_center_shape(self.p_c, &shape, self.n_samples)?;
        out.cov_center = self.cov_center;
        out.cov_l = self.cov_l;
        out.cov_joint = self.cov_joint;
        Ok(out)
    }
}

pub fn lower_to_s(l: &Matrix3<f64>) -> Vector6<f64> {
    Vector6::from_fn(|k, _| {
        let (i, j) = LOWER_INDICES[k];
        l[(i, j)]
    })
}

pub fn s_to_lower(s: &Vector6<f64>) -> Matrix3<f64> {
    let mut l = Matrix3::zeros();
    for (k, &(i, j)) in LOWER_INDICES.iter().enumerate() {
        l[(i, j)] = s[k];
    }
    l
}

/// Quadratic block, linear part and constant of a coefficient vector.
pub fn quadric_parts(v: &Vector10) -> (Matrix3<f64>, Vector3<f64>, f64) {
    let a = Matrix3::new(v[0], v[5], v[4], v[5], v[1], v[3], v[4], v[3], v[2]);
    (a, Vector3::new(v[6], v[7], v[8]), v[9])
}

pub fn quadric_from_parts(a: &Matrix3<f64>, b: &Vector3<f64>, d: f64) -> Vector10 {
    Vector10::from_column_slice(&[
        a[(0, 0)],
        a[(1, 1)],
        a[(2, 2)],
        a[(1, 2)],
        a[(0, 2)],
        a[(0, 1)],
        b[0],
        b[1],
        b[2],
        d,
    ])
}

/// `kJ - I²` of the quadratic block.
pub fn specificity(v: &Vector10) -> f64 {
    let (a, b, c, f, g, h) = (v[0], v[1], v[2], v[3], v[4], v[5]);
    let i = a + b + c;
    let j = a * b + b * c + a * c - f * f - g * g - h * h;
    K_SPECIFICITY * j - i * i
}

fn normalize_quadric(v: &Vector10) -> Vector10 {
    v / specificity(v).sqrt()
}

/// Design row `(x², y², z², 2yz, 2xz, 2xy, 2x, 2y, 2z, 1)`.
pub fn design_row(x: &Vector3<f64>) -> Vector10 {
    Vector10::from_column_slice(&[
        x[0] * x[0],
        x[1] * x[1],
        x[2] * x[2],
        2.0 * x[1] * x[2],
        2.0 * x[0] * x[2],
        2.0 * x[0] * x[1],
        2.0 * x[0],
        2.0 * x[1],
        2.0 * x[2],
        1.0,
    ])
}

/// The 6×6 block of the constraint matrix acting on `(a, b, c, f, g, h)`.
pub fn constraint_block() -> Matrix6<f64> {
    let k = K_SPECIFICITY;
    let off = k / 2.0 - 1.0;
    let mut c = Matrix6::zeros();
    for i in 0..3 {
        for j in 0..3 {
            c[(i, j)] = if i == j { -1.0 } else { off };
        }
        c[(i + 3, i + 3)] = -k;
    }
    c
}

/// Ellipsoid-specific weighted least squares on the unregularized
/// coefficients: minimizes `vᵀ D W Dᵀ v` subject to `vᵀ C v = 1`.
/// The result is expressed in the original coordinates and normalized.
pub fn fit_raw(samples: &[SamplePoint]) -> Result<Vector10, GeometryError> {
    if samples.len() < 10 {
        return Err(GeometryError::SamplesDegenerate);
    }
    if samples.iter().any(|s| !(s.sigma > 0.0) || !s.position.iter().all(|x| x.is_finite())) {
        return Err(GeometryError::SamplesDegenerate);
    }

    // Condition the problem: fit in centered, unit-scale coordinates.
    let n = samples.len() as f64;
    let centroid = samples.iter().map(|s| s.position).sum::<Vector3<f64>>() / n;
    let scale = (samples
        .iter()
        .map(|s| (s.position - centroid).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();
    if !(scale > 0.0) {
        return Err(GeometryError::SamplesDegenerate);
    }

    let mut design = DMatrix::<f64>::zeros(samples.len(), 10);
    let mut scatter = SMatrix::<f64, 10, 10>::zeros();
    for (row, s) in samples.iter().enumerate() {
        let x = design_row(&((s.position - centroid) / scale));
        let w = 1.0 / (s.sigma * s.sigma);
        scatter += x * x.transpose() * w;
        design.row_mut(row).copy_from(&(x * w.sqrt()).transpose());
    }

    let sv = design.singular_values();
    let smax = sv.max();
    let rank = sv.iter().filter(|&&s| s > smax * 1e-9).count();
    if rank < 9 {
        return Err(GeometryError::SamplesDegenerate);
    }

    let s11: Matrix6<f64> = scatter.fixed_view::<6, 6>(0, 0).into_owned();
    let s12: Matrix6x4 = scatter.fixed_view::<6, 4>(0, 6).into_owned();
    let s22: Matrix4<f64> = scatter.fixed_view::<4, 4>(6, 6).into_owned();
    let s22_inv = s22.cholesky().ok_or(GeometryError::SamplesDegenerate)?.inverse();
    let t: Matrix4x6 = -(s22_inv * s12.transpose());
    let m = s11 + s12 * t;
    let m = (m + m.transpose()) * 0.5;

    // Exact data makes `m` singular; a tiny ridge keeps Cholesky usable.
    let trace = m.trace().abs().max(1e-300);
    let mut chol = m.cholesky();
    let mut eps = 1e-14 * trace;
    while chol.is_none() && eps < 1e-6 * trace {
        chol = (m + Matrix6::identity() * eps).cholesky();
        eps *= 10.0;
    }
    let g = chol.ok_or(GeometryError::SamplesDegenerate)?.l();
    let g_inv = g.try_inverse().ok_or(GeometryError::SamplesDegenerate)?;
    let c1 = constraint_block();
    let b = g_inv * c1 * g_inv.transpose();
    let eig = ((b + b.transpose()) * 0.5).symmetric_eigen();
    let (idx, &emax) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    if !(emax > 0.0) {
        return Err(GeometryError::FitNotElliptic);
    }
    let w = eig.eigenvectors.column(idx).into_owned();
    let v1 = g_inv.transpose() * w;
    let v2 = t * v1;

    let mut vs = Vector10::zeros();
    vs.fixed_rows_mut::<6>(0).copy_from(&v1);
    vs.fixed_rows_mut::<4>(6).copy_from(&v2);

    // Back to original coordinates: x' = (x - t) / s.
    let (a_s, b_s, d_s) = quadric_parts(&vs);
    let s2 = scale * scale;
    let a = a_s / s2;
    let b_lin = b_s / scale - a * centroid;
    let d = centroid.dot(&(a_s * centroid)) / s2 - 2.0 * b_s.dot(&centroid) / scale + d_s;
    let v = quadric_from_parts(&a, &b_lin, d);
    let spec = specificity(&v);
    if !(spec > 0.0) {
        return Err(GeometryError::FitNotElliptic);
    }
    Ok(v / spec.sqrt())
}

/// Regularized ellipsoid fit. The constrained least-squares problem is
/// solved for the prior-shifted coefficients, which are then un-mixed with
/// the prior sphere to give the estimated surface.
pub fn fit_ellipsoid(samples: &[SamplePoint], prior: &RegularizationPrior) -> Result<EllipsoidEstimate, GeometryError> {
    if !(prior.lambda >= 0.0) || !(prior.radius0 > 0.0) {
        return Err(GeometryError::FitNotElliptic);
    }
    let mut v = fit_raw(samples)?;
    // Eigenvectors carry no sign; pick the one whose un-mixing with a
    // positive-definite prior stays positive definite.
    if v[0] + v[1] + v[2] > 0.0 {
        v = -v;
    }
    let q = prior.sphere_vector() * prior.lambda - v;
    let (a, b, d) = quadric_parts(&q);
    let a = (a + a.transpose()) * 0.5;
    let chol = a.cholesky().ok_or(GeometryError::FitNotElliptic)?;
    let p_c = -chol.solve(&b);
    let s = p_c.dot(&(a * p_c)) - d;
    if !(s > 0.0) || !s.is_finite() {
        return Err(GeometryError::FitNotElliptic);
    }
    let est = EllipsoidEstimate::from_center_shape(p_c, &(a / s), samples.len())?;
    let axes = est.semi_axes();
    if axes[0] < 1.0 || axes[2] > 50.0 {
        return Err(GeometryError::FitNotElliptic);
    }
    Ok(est)
}

/// Radial length from the center to the surface along the ray through `p`.
pub fn compute_l(p: &Vector3<f64>, est: &EllipsoidEstimate) -> Result<f64, GeometryError> {
    let r = p - est.p_c;
    let n = r.norm();
    if n == 0.0 {
        return Err(GeometryError::RayUndefined);
    }
    Ok(1.0 / (est.l.transpose() * (r / n)).norm())
}

/// Point where the ray from the center through `p` meets the surface.
pub fn project_to_surface(p: &Vector3<f64>, est: &EllipsoidEstimate) -> Result<Vector3<f64>, GeometryError> {
    let l = compute_l(p, est)?;
    Ok(est.p_c + (p - est.p_c).normalize() * l)
}

/// Sampling offsets on a Vogel (golden-angle) spiral covering a disk.
pub fn spiral_offsets(n: usize, radius_px: f64) -> Vec<Vector2<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let r = radius_px * ((i as f64 + 0.5) / n as f64).sqrt();
            let th = i as f64 * golden;
            Vector2::new(r * th.cos(), r * th.sin())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub n_samples: usize,
    pub radius_px: f64,
    pub m_runs: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            radius_px: 30.0,
            m_runs: 20,
        }
    }
}

/// Oracle queries at `n` spiral-distributed pixels around the goal. Each
/// sample is `tip + predicted vector`, weighted by the oracle's noise level
/// at the predicted distance.
pub fn collect_samples(
    goal_px: &Vector2<f64>,
    n: usize,
    radius_px: f64,
    tip: &Vector3<f64>,
    phantom: &EyePhantom,
    cam: &CameraModel,
    oracle: &mut DepthOracle,
) -> Result<Vec<SamplePoint>, GeometryError> {
    if n < 200 {
        return Err(GeometryError::TooFew {
            what: "samples",
            needed: 200,
            got: n,
        });
    }
    let mut out = Vec::with_capacity(n);
    let mut dropped = 0usize;
    for off in spiral_offsets(n, radius_px) {
        match oracle.predict(tip, &(goal_px + off), phantom, cam) {
            Ok(d) => {
                let sigma = oracle.config().scalar_sigma_at(d.norm());
                out.push(SamplePoint {
                    position: tip + d,
                    sigma,
                });
            }
            Err(SimError::GoalOffRetina) => dropped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if dropped * 10 > n {
        return Err(GeometryError::GoalNearBoundary);
    }
    Ok(out)
}

/// Repeated sampling and fitting. Returns the estimate at the mean of the
/// fitted `(p_c, S)` with the sample covariance attached.
#[allow(clippy::too_many_arguments)]
pub fn estimate_covariance(
    goal_px: &Vector2<f64>,
    prior: &RegularizationPrior,
    sampling: &SamplingConfig,
    tip: &Vector3<f64>,
    phantom: &EyePhantom,
    cam: &CameraModel,
    oracle: &mut DepthOracle,
) -> Result<EllipsoidEstimate, GeometryError> {
    if sampling.m_runs < 2 {
        return Err(GeometryError::TooFew {
            what: "runs",
            needed: 2,
            got: sampling.m_runs,
        });
    }
    let mut ys: Vec<SVector<f64, 9>> = Vec::with_capacity(sampling.m_runs);
    let mut n_samples = 0;
    for _ in 0..sampling.m_runs {
        let samples = collect_samples(goal_px, sampling.n_samples, sampling.radius_px, tip, phantom, cam, oracle)?;
        n_samples += samples.len();
        let est = fit_ellipsoid(&samples, prior)?;
        let mut y = SVector::<f64, 9>::zeros();
        y.fixed_rows_mut::<3>(0).copy_from(&est.p_c);
        y.fixed_rows_mut::<6>(3).copy_from(&est.s_vector());
        ys.push(y);
    }
    let (mean, cov) = mean_and_covariance(&ys);
    let p_c = mean.fixed_rows::<3>(0).into_owned();
    let l = s_to_lower(&mean.fixed_rows::<6>(3).into_owned());
    Ok(EllipsoidEstimate::from_center_factor(p_c, l, n_samples).with_covariance(cov))
}

/// Sample mean and unbiased sample covariance.
pub fn mean_and_covariance<const N: usize>(ys: &[SVector<f64, N>]) -> (SVector<f64, N>, SMatrix<f64, N, N>) {
    let m = ys.len() as f64;
    let mean = ys.iter().sum::<SVector<f64, N>>() / m;
    let mut cov = SMatrix::<f64, N, N>::zeros();
    for y in ys {
        let e = y - mean;
        cov += e * e.transpose();
    }
    if ys.len() > 1 {
        cov /= m - 1.0;
    }
    (mean, cov)
}
