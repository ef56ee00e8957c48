//! Rotation helpers on SO(3): hat map, exponential/logarithm and the right
//! Jacobian used when linearizing the attitude integration.

use nalgebra::{Matrix3, Vector3};

#[inline]
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
}

/// Rodrigues formula with a series fallback near the identity.
pub fn exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = hat(w);
    let (a, b) = if theta2 < 1e-10 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

pub fn log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-6 {
        return v * 0.5 * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near pi: recover the axis from the symmetric part.
        let b = (r + Matrix3::identity()) * 0.5;
        let mut axis = Vector3::new(
            b[(0, 0)].max(0.0).sqrt(),
            b[(1, 1)].max(0.0).sqrt(),
            b[(2, 2)].max(0.0).sqrt(),
        );
        if axis[0] > 1e-6 {
            axis[1] = axis[1].copysign(b[(0, 1)]);
            axis[2] = axis[2].copysign(b[(0, 2)]);
        } else if axis[1] > 1e-6 {
            axis[2] = axis[2].copysign(b[(1, 2)]);
        }
        return axis.normalize() * theta;
    }
    v * (theta / (2.0 * theta.sin()))
}

/// Right Jacobian `J_r(w)`: `exp(w + d) ~= exp(w) exp(J_r(w) d)`.
pub fn right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = hat(w);
    let (a, b) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() - k * a + k * k * b
}

/// One Newton step of the polar decomposition, `R <- (3R - R R^T R) / 2`,
/// applied until the orthonormality defect is at round-off level.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let mut out = *r;
    for _ in 0..4 {
        let defect = (out.transpose() * out - Matrix3::identity()).norm();
        if defect < 1e-15 {
            break;
        }
        out = (out * 3.0 - out * out.transpose() * out) * 0.5;
    }
    out
}

/// A rotation whose third column is `axis` (normalized). The remaining
/// columns are chosen deterministically.
pub fn frame_with_z(axis: &Vector3<f64>) -> Matrix3<f64> {
    let z = axis.normalize();
    let helper = if z[0].abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let x = (helper - z * helper.dot(&z)).normalize();
    let y = z.cross(&x);
    Matrix3::from_columns(&[x, y, z])
}

pub fn orthonormality_defect(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}
