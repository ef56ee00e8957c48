//! Exact point-to-ellipsoid distance.
//!
//! Closest-point computation follows the robust bisection scheme of
//! Eberly ("Distance from a point to an ellipse, an ellipsoid, or a
//! hyperellipsoid"): the problem is reduced to the first octant with axes
//! sorted in decreasing order, then a monotone scalar root is bracketed and
//! bisected to machine precision.

use nalgebra::Vector3;

const MAX_BISECTIONS: usize = 1100;

/// Euclidean distance from `point` (expressed in the ellipsoid's principal
/// frame, origin at the center) to the surface with semi-axes `axes`, and
/// the closest surface point in the same frame.
pub fn closest_point(axes: &Vector3<f64>, point: &Vector3<f64>) -> (f64, Vector3<f64>) {
    // Sort axes in decreasing order, remembering the permutation.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| axes[b].partial_cmp(&axes[a]).unwrap());
    let e = [axes[order[0]], axes[order[1]], axes[order[2]]];
    let y = [
        point[order[0]].abs(),
        point[order[1]].abs(),
        point[order[2]].abs(),
    ];

    let (dist, x) = distance_sorted(e, y);

    let mut out = Vector3::zeros();
    for (slot, &axis) in order.iter().enumerate() {
        out[axis] = x[slot].copysign(point[axis]);
    }
    (dist, out)
}

/// Signed distance: positive inside the ellipsoid, negative outside.
pub fn signed_distance(axes: &Vector3<f64>, point: &Vector3<f64>) -> f64 {
    if (axes[0] - axes[1]).abs() < 1e-15 && (axes[1] - axes[2]).abs() < 1e-15 {
        return axes[0] - point.norm();
    }
    let (dist, _) = closest_point(axes, point);
    let level = (point[0] / axes[0]).powi(2) + (point[1] / axes[1]).powi(2)
        + (point[2] / axes[2]).powi(2);
    if level <= 1.0 {
        dist
    } else {
        -dist
    }
}

fn robust_length(v: &[f64]) -> f64 {
    let m = v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if m == 0.0 {
        return 0.0;
    }
    m * v.iter().map(|x| (x / m) * (x / m)).sum::<f64>().sqrt()
}

fn root_2d(r0: f64, z0: f64, z1: f64, g: f64) -> f64 {
    let n0 = r0 * z0;
    let mut s0 = z1 - 1.0;
    let mut s1 = if g < 0.0 { 0.0 } else { robust_length(&[n0, z1]) - 1.0 };
    let mut s = 0.0;
    for _ in 0..MAX_BISECTIONS {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let ratio0 = n0 / (s + r0);
        let ratio1 = z1 / (s + 1.0);
        let g = ratio0 * ratio0 + ratio1 * ratio1 - 1.0;
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

fn root_3d(r0: f64, r1: f64, z0: f64, z1: f64, z2: f64, g: f64) -> f64 {
    let n0 = r0 * z0;
    let n1 = r1 * z1;
    let mut s0 = z2 - 1.0;
    let mut s1 = if g < 0.0 {
        0.0
    } else {
        robust_length(&[n0, n1, z2]) - 1.0
    };
    let mut s = 0.0;
    for _ in 0..MAX_BISECTIONS {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let ratio0 = n0 / (s + r0);
        let ratio1 = n1 / (s + r1);
        let ratio2 = z2 / (s + 1.0);
        let g = ratio0 * ratio0 + ratio1 * ratio1 + ratio2 * ratio2 - 1.0;
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

/// Ellipse case, `e0 >= e1 > 0`, `y0, y1 >= 0`.
fn distance_ellipse(e0: f64, e1: f64, y0: f64, y1: f64) -> (f64, [f64; 2]) {
    if y1 > 0.0 {
        if y0 > 0.0 {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g != 0.0 {
                let r0 = (e0 / e1) * (e0 / e1);
                let sbar = root_2d(r0, z0, z1, g);
                let x0 = r0 * y0 / (sbar + r0);
                let x1 = y1 / (sbar + 1.0);
                let d = ((x0 - y0).powi(2) + (x1 - y1).powi(2)).sqrt();
                (d, [x0, x1])
            } else {
                (0.0, [y0, y1])
            }
        } else {
            (( y1 - e1).abs(), [0.0, e1])
        }
    } else {
        let numer0 = e0 * y0;
        let denom0 = e0 * e0 - e1 * e1;
        if numer0 < denom0 {
            let xde0 = numer0 / denom0;
            let x0 = e0 * xde0;
            let x1 = e1 * (1.0 - xde0 * xde0).max(0.0).sqrt();
            let d = ((x0 - y0).powi(2) + x1 * x1).sqrt();
            (d, [x0, x1])
        } else {
            ((y0 - e0).abs(), [e0, 0.0])
        }
    }
}

/// Ellipsoid case, `e0 >= e1 >= e2 > 0`, all `y >= 0`.
fn distance_sorted(e: [f64; 3], y: [f64; 3]) -> (f64, [f64; 3]) {
    let [e0, e1, e2] = e;
    let [y0, y1, y2] = y;
    if y2 > 0.0 {
        if y1 > 0.0 {
            if y0 > 0.0 {
                let z0 = y0 / e0;
                let z1 = y1 / e1;
                let z2 = y2 / e2;
                let g = z0 * z0 + z1 * z1 + z2 * z2 - 1.0;
                if g != 0.0 {
                    let r0 = (e0 / e2) * (e0 / e2);
                    let r1 = (e1 / e2) * (e1 / e2);
                    let sbar = root_3d(r0, r1, z0, z1, z2, g);
                    let x = [r0 * y0 / (sbar + r0), r1 * y1 / (sbar + r1), y2 / (sbar + 1.0)];
                    let d = ((x[0] - y0).powi(2) + (x[1] - y1).powi(2) + (x[2] - y2).powi(2))
                        .sqrt();
                    (d, x)
                } else {
                    (0.0, y)
                }
            } else {
                let (d, [x1, x2]) = distance_ellipse(e1, e2, y1, y2);
                (d, [0.0, x1, x2])
            }
        } else if y0 > 0.0 {
            let (d, [x0, x2]) = distance_ellipse(e0, e2, y0, y2);
            (d, [x0, 0.0, x2])
        } else {
            ((y2 - e2).abs(), [0.0, 0.0, e2])
        }
    } else {
        let denom0 = e0 * e0 - e2 * e2;
        let denom1 = e1 * e1 - e2 * e2;
        let numer0 = e0 * y0;
        let numer1 = e1 * y1;
        if numer0 < denom0 && numer1 < denom1 {
            let xde0 = numer0 / denom0;
            let xde1 = numer1 / denom1;
            let discr = 1.0 - xde0 * xde0 - xde1 * xde1;
            if discr > 0.0 {
                let x = [e0 * xde0, e1 * xde1, e2 * discr.sqrt()];
                let d = ((x[0] - y0).powi(2) + (x[1] - y1).powi(2) + x[2] * x[2]).sqrt();
                return (d, x);
            }
        }
        let (d, [x0, x1]) = distance_ellipse(e0, e1, y0, y1);
        (d, [x0, x1, 0.0])
    }
}
