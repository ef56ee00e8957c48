//! Deterministic surrogate of the probabilistic retina-clearance constraint.
//!
//! The tool must stay inside the fitted retinal ellipsoid (the vitreous side)
//! with probability at least `alpha`:
//! `Pr((p - p_c)ᵀ L Lᵀ (p - p_c) <= 1) >= alpha`, where `(p_c, S)` is Gaussian
//! around the fitted estimate. Linearizing the quadratic in `(p_c, S)` at the
//! estimate gives a scalar Gaussian, and the constraint becomes
//! `g(p) = erf⁻¹(2α - 1) √(2 aᵀ Σ a) + aᵀ ŷ - (1 + b) <= 0`.
//!
//! Because `aᵀŷ - b` equals the exact quadratic at the expansion point,
//! `g = κ √(2aᵀΣa) + (p - p̂_c)ᵀ Â (p - p̂_c) - 1`; the margin is therefore
//! the exact level-set value tightened by a variance term.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{EllipsoidEstimate, LOWER_INDICES};

pub type Vector9 = SVector<f64, 9>;
pub type Matrix9 = SMatrix<f64, 9, 9>;
type Matrix9x3 = SMatrix<f64, 9, 3>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChanceError {
    #[error("out of domain")]
    OutOfDomain,
    #[error("confidence level {0} outside (0.5, 1)")]
    InvalidAlpha(f64),
    #[error("linearization point coincides with the ellipsoid center")]
    AtCenter,
}

/// Which parts of the Monte-Carlo parameter covariance enter the margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceStructure {
    /// Center and shape blocks only; cross terms dropped.
    #[default]
    BlockDiagonal,
    /// Full 9×9 covariance including center/shape correlation.
    Joint,
}

/// Inverse error function, accurate to round-off for `|x| < 1`.
///
/// A rational initial guess (Giles 2010) is refined with Halley steps on
/// `erf(y) - x`.
pub fn erf_inv(x: f64) -> Result<f64, ChanceError> {
    if !(x.abs() < 1.0) {
        return Err(ChanceError::OutOfDomain);
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let mut w = -((1.0 - x) * (1.0 + x)).ln();
    let p = if w < 5.0 {
        w -= 2.5;
        let mut p = 2.810_226_36e-08;
        for c in [
            3.432_739_39e-07,
            -3.523_387_7e-06,
            -4.391_506_54e-06,
            0.000_218_580_87,
            -0.001_253_725_03,
            -0.004_177_681_64,
            0.246_640_727,
            1.501_409_41,
        ] {
            p = c + p * w;
        }
        p
    } else {
        w = w.sqrt() - 3.0;
        let mut p = -0.000_200_214_257;
        for c in [
            0.000_100_950_558,
            0.001_349_343_22,
            -0.003_673_428_44,
            0.005_739_507_73,
            -0.007_622_461_3,
            0.009_438_870_47,
            1.001_674_06,
            2.832_976_82,
        ] {
            p = c + p * w;
        }
        p
    };
    let mut y = p * x;
    let two_over_sqrt_pi = std::f64::consts::FRAC_2_SQRT_PI;
    for _ in 0..3 {
        let f = libm::erf(y) - x;
        let df = two_over_sqrt_pi * (-y * y).exp();
        if df == 0.0 {
            break;
        }
        let u = f / df;
        let step = u / (1.0 + y * u);
        y -= step;
        if step.abs() <= 1e-16 * y.abs() {
            break;
        }
    }
    Ok(y)
}

/// Linear chance constraint `Pr(aᵀ y <= 1 + b) >= alpha` built at a tool
/// position. Keeps the expansion data needed for derivatives in `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizedChanceConstraint {
    pub a: Vector9,
    pub b: f64,
    pub y_hat: Vector9,
    pub sigma: Matrix9,
    pub alpha: f64,
    pub p: Vector3<f64>,
    pub p_c_hat: Vector3<f64>,
    pub l_hat: Matrix3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChanceMargin {
    pub g: f64,
    pub gradient_p: Vector3<f64>,
    pub hessian_p: Matrix3<f64>,
}

pub fn assemble_sigma(est: &EllipsoidEstimate, structure: CovarianceStructure) -> Matrix9 {
    match structure {
        CovarianceStructure::Joint => est.cov_joint,
        CovarianceStructure::BlockDiagonal => {
            let mut s = Matrix9::zeros();
            s.fixed_view_mut::<3, 3>(0, 0).copy_from(&est.cov_center);
            s.fixed_view_mut::<6, 6>(3, 3).copy_from(&est.cov_l);
            s
        }
    }
}

fn coefficient_vector(r: &Vector3<f64>, l: &Matrix3<f64>) -> Vector9 {
    let a_mat = l * l.transpose();
    let w = l.transpose() * r;
    let mut a = Vector9::zeros();
    a.fixed_rows_mut::<3>(0).copy_from(&(-(a_mat * r) * 2.0));
    for (k, &(i, j)) in LOWER_INDICES.iter().enumerate() {
        a[3 + k] = 2.0 * r[i] * w[j];
    }
    a
}

pub fn linearize(
    p: &Vector3<f64>,
    est: &EllipsoidEstimate,
    alpha: f64,
    structure: CovarianceStructure,
) -> Result<LinearizedChanceConstraint, ChanceError> {
    if !(alpha > 0.5 && alpha < 1.0) {
        return Err(ChanceError::InvalidAlpha(alpha));
    }
    let r = p - est.p_c;
    if r.norm() == 0.0 {
        return Err(ChanceError::AtCenter);
    }
    let l = est.l;
    let a_mat = l * l.transpose();
    let a = coefficient_vector(&r, &l);
    let s_hat = est.s_vector();
    let mut y_hat = Vector9::zeros();
    y_hat.fixed_rows_mut::<3>(0).copy_from(&est.p_c);
    y_hat.fixed_rows_mut::<6>(3).copy_from(&s_hat);

    // a = [2M, 2K] with M = -(p - p̂_c)ᵀÂ and K the lower-triangular part of
    // (p - p̂_c)(p - p̂_c)ᵀL̂.
    let two_k = a.fixed_rows::<6>(3).into_owned();
    let quad = r.dot(&(a_mat * r));
    let b = -2.0 * r.dot(&(a_mat * est.p_c)) + two_k.dot(&s_hat) - quad;

    Ok(LinearizedChanceConstraint {
        a,
        b,
        y_hat,
        sigma: assemble_sigma(est, structure),
        alpha,
        p: *p,
        p_c_hat: est.p_c,
        l_hat: l,
    })
}

/// `erf⁻¹(2α - 1)`.
pub fn kappa(alpha: f64) -> Result<f64, ChanceError> {
    erf_inv(2.0 * alpha - 1.0)
}

/// Margin value with its exact gradient and Hessian in the tool position.
pub fn margin(lc: &LinearizedChanceConstraint) -> ChanceMargin {
    let kappa = kappa(lc.alpha).expect("alpha validated at linearization");
    let l = lc.l_hat;
    let a_mat = l * l.transpose();
    let r = lc.p - lc.p_c_hat;
    let w = l.transpose() * r;
    let a = lc.a;
    let sa = lc.sigma * a;
    let h = 2.0 * a.dot(&sa);

    let g = kappa * h.max(0.0).sqrt() + lc.a.dot(&lc.y_hat) - (1.0 + lc.b);

    // Jacobian of a(p).
    let mut jac = Matrix9x3::zeros();
    jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-a_mat * 2.0));
    for (k, &(i, j)) in LOWER_INDICES.iter().enumerate() {
        let mut row = l.column(j).into_owned() * r[i];
        row[i] += w[j];
        jac.row_mut(3 + k).copy_from(&(row * 2.0).transpose());
    }

    let mut grad = a_mat * r * 2.0;
    let mut hess = a_mat * 2.0;
    if h > 1e-300 {
        let sigma_len = h.sqrt();
        let grad_h = jac.transpose() * sa * 4.0;
        let mut hess_h = jac.transpose() * lc.sigma * jac;
        for (k, &(i, j)) in LOWER_INDICES.iter().enumerate() {
            let lj = l.column(j).into_owned();
            let mut outer = Matrix3::zeros();
            outer.column_mut(i).copy_from(&lj);
            let second = (outer + outer.transpose()) * 2.0;
            hess_h += second * sa[3 + k];
        }
        hess_h *= 4.0;
        grad += grad_h * (kappa / (2.0 * sigma_len));
        hess += (hess_h / (2.0 * sigma_len) - grad_h * grad_h.transpose() / (4.0 * h * sigma_len)) * kappa;
    }

    ChanceMargin {
        g,
        gradient_p: grad,
        hessian_p: (hess + hess.transpose()) * 0.5,
    }
}

/// Convenience: linearize and evaluate in one call.
pub fn margin_at(
    p: &Vector3<f64>,
    est: &EllipsoidEstimate,
    alpha: f64,
    structure: CovarianceStructure,
) -> Result<ChanceMargin, ChanceError> {
    linearize(p, est, alpha, structure).map(|lc| margin(&lc))
}
