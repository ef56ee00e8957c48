//! Eye-motion tracking between microscope frames: Shi-Tomasi corners and
//! pyramidal Lucas-Kanade flow, aggregated into a robust global shift that
//! re-registers the goal pixel and the incision point.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{FloatImage, GrayImage};
use crate::phantom::CameraModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("texture insufficient")]
    TextureInsufficient,
    #[error("tracking lost")]
    TrackingLost,
    #[error("goal left field of view")]
    GoalLeftFieldOfView,
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
}

/// Minimum number of features (and of tracked features) for a valid result.
pub const MIN_FEATURES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowFeature {
    pub position: Vector2<f64>,
    pub quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowMatch {
    pub from: Vector2<f64>,
    pub to: Vector2<f64>,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowResult {
    pub matches: Vec<FlowMatch>,
    pub global_shift: Vector2<f64>,
    pub inlier_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CornerParams {
    pub max_n: usize,
    /// Fraction of the strongest response a corner must reach.
    pub quality_level: f64,
    /// Absolute floor on the min-eigenvalue response.
    pub min_quality: f64,
    pub min_spacing: f64,
    pub block_radius: usize,
}

impl Default for CornerParams {
    fn default() -> Self {
        Self {
            max_n: 200,
            quality_level: 0.01,
            min_quality: 1.0,
            min_spacing: 7.0,
            block_radius: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LkParams {
    pub levels: usize,
    pub window: usize,
    pub max_iterations: usize,
    pub epsilon: f64,
    /// Mean absolute intensity residual above which a feature is rejected.
    pub max_residual: f64,
    /// Distance to the median flow within which a track counts as inlier.
    pub inlier_radius: f64,
}

impl Default for LkParams {
    fn default() -> Self {
        Self {
            levels: 3,
            window: 15,
            max_iterations: 30,
            epsilon: 0.01,
            max_residual: 12.0,
            inlier_radius: 1.0,
        }
    }
}

/// Region of the frame used for tracking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropSpec {
    pub width: usize,
    pub height: usize,
    /// Crop center in frame pixels; `None` means the frame center.
    pub center: Option<[f64; 2]>,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            width: 300,
            height: 160,
            center: None,
        }
    }
}

impl CropSpec {
    pub fn origin(&self, frame_w: usize, frame_h: usize) -> (isize, isize) {
        let c = self
            .center
            .unwrap_or([(frame_w as f64 - 1.0) * 0.5, (frame_h as f64 - 1.0) * 0.5]);
        let x0 = (c[0] - (self.width as f64 - 1.0) * 0.5).round() as isize;
        let y0 = (c[1] - (self.height as f64 - 1.0) * 0.5).round() as isize;
        (x0, y0)
    }

    pub fn apply(&self, img: &GrayImage) -> GrayImage {
        let (x0, y0) = self.origin(img.width(), img.height());
        img.crop(x0, y0, self.width, self.height)
    }
}

// ---------------------------------------------------------------------------
// Gradients and structure tensor.

fn sobel(img: &FloatImage) -> (FloatImage, FloatImage) {
    let (w, h) = (img.width, img.height);
    let mut gx = FloatImage::zeros(w, h);
    let mut gy = FloatImage::zeros(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| img.at_clamped(x + dx, y + dy);
            let sx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let sy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let i = y as usize * w + x as usize;
            gx.data[i] = sx / 8.0;
            gy.data[i] = sy / 8.0;
        }
    }
    (gx, gy)
}

fn min_eigen_response(gx: &FloatImage, gy: &FloatImage, radius: usize) -> FloatImage {
    let (w, h) = (gx.width, gx.height);
    let mut out = FloatImage::zeros(w, h);
    let r = radius as isize;
    for y in r..h as isize - r {
        for x in r..w as isize - r {
            let (mut a, mut b, mut c) = (0f64, 0f64, 0f64);
            for dy in -r..=r {
                for dx in -r..=r {
                    let i = (y + dy) as usize * w + (x + dx) as usize;
                    let ix = gx.data[i] as f64;
                    let iy = gy.data[i] as f64;
                    a += ix * ix;
                    b += ix * iy;
                    c += iy * iy;
                }
            }
            let half_tr = 0.5 * (a + c);
            let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            out.data[y as usize * w + x as usize] = (half_tr - disc) as f32;
        }
    }
    out
}

/// Shi-Tomasi corners, strongest first, with sub-pixel refinement.
pub fn detect_corners(image: &GrayImage, params: &CornerParams) -> Result<Vec<FlowFeature>, FlowError> {
    let img = FloatImage::from_gray(image);
    let (gx, gy) = sobel(&img);
    let score = min_eigen_response(&gx, &gy, params.block_radius);
    let (w, h) = (img.width, img.height);
    let max_score = score.data.iter().cloned().fold(0f32, f32::max) as f64;
    let threshold = (params.quality_level * max_score).max(params.min_quality);
    let margin = params.block_radius + 2;

    let mut candidates = Vec::new();
    if w > 2 * margin && h > 2 * margin {
        for y in margin..h - margin {
            for x in margin..w - margin {
                let s = score.at(x, y) as f64;
                if s < threshold {
                    continue;
                }
                let mut is_max = true;
                'nms: for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if (dx != 0 || dy != 0)
                            && (score.at((x as isize + dx) as usize, (y as isize + dy) as usize) as f64) > s
                        {
                            is_max = false;
                            break 'nms;
                        }
                    }
                }
                if is_max {
                    candidates.push((x, y, s));
                }
            }
        }
    }
    candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));

    let min_d2 = params.min_spacing * params.min_spacing;
    let mut out: Vec<FlowFeature> = Vec::new();
    for (x, y, s) in candidates {
        if out.len() >= params.max_n {
            break;
        }
        let p = refine_subpixel(&gx, &gy, Vector2::new(x as f64, y as f64), params.block_radius + 2);
        if out.iter().all(|f| (f.position - p).norm_squared() >= min_d2) {
            out.push(FlowFeature { position: p, quality: s });
        }
    }
    if out.len() < MIN_FEATURES {
        return Err(FlowError::TextureInsufficient);
    }
    Ok(out)
}

/// Gradient-orthogonality refinement: the corner `q` is the point for which
/// every image gradient in the window is orthogonal to `p - q`.
fn refine_subpixel(gx: &FloatImage, gy: &FloatImage, start: Vector2<f64>, radius: usize) -> Vector2<f64> {
    let r = radius as isize;
    let mut q = start;
    for _ in 0..10 {
        let mut a = Matrix2::zeros();
        let mut bv = Vector2::zeros();
        for dy in -r..=r {
            for dx in -r..=r {
                let p = Vector2::new(q[0] + dx as f64, q[1] + dy as f64);
                let g = Vector2::new(gx.sample(p[0] as f32, p[1] as f32) as f64, gy.sample(p[0] as f32, p[1] as f32) as f64);
                let ggt = g * g.transpose();
                a += ggt;
                bv += ggt * p;
            }
        }
        let Some(next) = a.try_inverse().map(|inv| inv * bv) else {
            break;
        };
        if !next.iter().all(|c| c.is_finite()) || (next - start).norm() > radius as f64 {
            return start;
        }
        let moved = (next - q).norm();
        q = next;
        if moved < 1e-3 {
            break;
        }
    }
    q
}

// ---------------------------------------------------------------------------
// Pyramidal Lucas-Kanade.

fn downsample(img: &FloatImage) -> FloatImage {
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (w, h) = (img.width, img.height);
    let mut tmp = FloatImage::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, c) in K.iter().enumerate() {
                acc += c * img.at_clamped(x as isize + k as isize - 2, y as isize);
            }
            tmp.data[y * w + x] = acc;
        }
    }
    let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = FloatImage::zeros(nw, nh);
    for y in 0..nh {
        for x in 0..nw {
            let mut acc = 0.0;
            for (k, c) in K.iter().enumerate() {
                acc += c * tmp.at_clamped(2 * x as isize, 2 * y as isize + k as isize - 2);
            }
            out.data[y * nw + x] = acc;
        }
    }
    out
}

struct Level {
    img: FloatImage,
    gx: FloatImage,
    gy: FloatImage,
}

fn pyramid(img: &GrayImage, levels: usize) -> Vec<Level> {
    let mut out = Vec::with_capacity(levels);
    let mut cur = FloatImage::from_gray(img);
    for l in 0..levels {
        let (w, h) = (cur.width, cur.height);
        let mut gx = FloatImage::zeros(w, h);
        let mut gy = FloatImage::zeros(w, h);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = y as usize * w + x as usize;
                gx.data[i] = 0.5 * (cur.at_clamped(x + 1, y) - cur.at_clamped(x - 1, y));
                gy.data[i] = 0.5 * (cur.at_clamped(x, y + 1) - cur.at_clamped(x, y - 1));
            }
        }
        let next = if l + 1 < levels { Some(downsample(&cur)) } else { None };
        out.push(Level { img: cur, gx, gy });
        match next {
            Some(n) => cur = n,
            None => break,
        }
    }
    out
}

fn track_one(prev: &[Level], next: &[Level], p0: Vector2<f64>, params: &LkParams) -> (Vector2<f64>, bool) {
    let half = (params.window / 2) as isize;
    let n_px = ((2 * half + 1) * (2 * half + 1)) as f64;
    let mut guess = Vector2::zeros();
    let top = prev.len() - 1;
    let mut residual = f64::INFINITY;
    for level in (0..=top).rev() {
        let scale = (1u32 << level) as f64;
        let pl = p0 / scale;
        let (lp, ln) = (&prev[level], &next[level]);

        let mut patch = Vec::with_capacity(n_px as usize);
        let (mut gxx, mut gxy, mut gyy) = (0f64, 0f64, 0f64);
        for dy in -half..=half {
            for dx in -half..=half {
                let x = (pl[0] + dx as f64) as f32;
                let y = (pl[1] + dy as f64) as f32;
                let ix = lp.gx.sample(x, y) as f64;
                let iy = lp.gy.sample(x, y) as f64;
                let i = lp.img.sample(x, y) as f64;
                gxx += ix * ix;
                gxy += ix * iy;
                gyy += iy * iy;
                patch.push((x, y, i, ix, iy));
            }
        }
        let g = Matrix2::new(gxx, gxy, gxy, gyy);
        let det = gxx * gyy - gxy * gxy;
        let min_eig = 0.5 * (gxx + gyy) - (0.25 * (gxx - gyy).powi(2) + gxy * gxy).sqrt();
        if det <= 0.0 || min_eig / n_px < 1e-3 {
            return (p0, false);
        }
        let g_inv = g.try_inverse().unwrap();

        let mut d = Vector2::zeros();
        for _ in 0..params.max_iterations {
            let mut b = Vector2::zeros();
            let off = guess + d;
            for &(x, y, i, ix, iy) in &patch {
                let j = ln.img.sample(x + off[0] as f32, y + off[1] as f32) as f64;
                let diff = i - j;
                b[0] += diff * ix;
                b[1] += diff * iy;
            }
            let eta = g_inv * b;
            d += eta;
            if eta.norm() < params.epsilon {
                break;
            }
        }
        if level == 0 {
            let off = guess + d;
            residual = patch
                .iter()
                .map(|&(x, y, i, _, _)| (i - ln.img.sample(x + off[0] as f32, y + off[1] as f32) as f64).abs())
                .sum::<f64>()
                / n_px;
            guess = off;
        } else {
            guess = (guess + d) * 2.0;
        }
    }
    let to = p0 + guess;
    let w = prev[0].img.width as f64;
    let h = prev[0].img.height as f64;
    let inside = to[0] >= 0.0 && to[1] >= 0.0 && to[0] <= w - 1.0 && to[1] <= h - 1.0;
    let ok = inside && residual <= params.max_residual && guess.iter().all(|v| v.is_finite());
    (to, ok)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Tracks `features` from `prev` into `next`; the global shift is the
/// component-wise median of the successful tracks.
pub fn lk_flow(prev: &GrayImage, next: &GrayImage, features: &[FlowFeature], params: &LkParams) -> Result<FlowResult, FlowError> {
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(FlowError::SizeMismatch(prev.width(), prev.height(), next.width(), next.height()));
    }
    if features.len() < MIN_FEATURES {
        return Err(FlowError::TrackingLost);
    }
    let pp = pyramid(prev, params.levels.max(1));
    let pn = pyramid(next, params.levels.max(1));
    let matches: Vec<FlowMatch> = features
        .iter()
        .map(|f| {
            let (to, ok) = track_one(&pp, &pn, f.position, params);
            FlowMatch { from: f.position, to, ok }
        })
        .collect();
    let mut dx: Vec<f64> = matches.iter().filter(|m| m.ok).map(|m| m.to[0] - m.from[0]).collect();
    let mut dy: Vec<f64> = matches.iter().filter(|m| m.ok).map(|m| m.to[1] - m.from[1]).collect();
    if dx.len() < MIN_FEATURES {
        return Err(FlowError::TrackingLost);
    }
    let shift = Vector2::new(median(&mut dx), median(&mut dy));
    let inlier_count = matches
        .iter()
        .filter(|m| m.ok && ((m.to - m.from) - shift).norm() <= params.inlier_radius)
        .count();
    if inlier_count < MIN_FEATURES {
        return Err(FlowError::TrackingLost);
    }
    Ok(FlowResult {
        matches,
        global_shift: shift,
        inlier_count,
    })
}

/// Crop both frames, detect corners in the first and track them.
pub fn track_frames(
    prev: &GrayImage,
    next: &GrayImage,
    crop: &CropSpec,
    corners: &CornerParams,
    lk: &LkParams,
) -> Result<FlowResult, FlowError> {
    let a = crop.apply(prev);
    let b = crop.apply(next);
    let features = detect_corners(&a, corners)?;
    lk_flow(&a, &b, &features, lk)
}

/// Moves the on-screen goal and the incision point by the measured shift.
pub fn update_goal_rcm(
    shift_px: &Vector2<f64>,
    goal_px: &Vector2<f64>,
    p_s: &Vector3<f64>,
    cam: &CameraModel,
) -> Result<(Vector2<f64>, Vector3<f64>), FlowError> {
    let goal = goal_px + shift_px;
    if !cam.contains(&goal) {
        return Err(FlowError::GoalLeftFieldOfView);
    }
    let mm = shift_px * cam.mm_per_px;
    Ok((goal, p_s + Vector3::new(mm[0], mm[1], 0.0)))
}

/// Copy of `image` with tracked features (bright crosses) and their motion
/// vectors (dark lines, scaled by `vector_gain`) drawn in.
pub fn debug_overlay(image: &GrayImage, result: &FlowResult, vector_gain: f64) -> GrayImage {
    let mut out = image.clone();
    let (w, h) = (out.width() as isize, out.height() as isize);
    let mut put = |x: isize, y: isize, v: u8| {
        if x >= 0 && y >= 0 && x < w && y < h {
            out.set(x as usize, y as usize, v);
        }
    };
    for m in &result.matches {
        let (cx, cy) = (m.from[0].round() as isize, m.from[1].round() as isize);
        let tone = if m.ok { 255 } else { 128 };
        for k in -2..=2 {
            put(cx + k, cy, tone);
            put(cx, cy + k, tone);
        }
        if m.ok {
            let d = (m.to - m.from) * vector_gain;
            let steps = d.norm().ceil().max(1.0) as usize;
            for s in 0..=steps {
                let p = m.from + d * (s as f64 / steps as f64);
                put(p[0].round() as isize, p[1].round() as isize, 0);
            }
        }
    }
    out
}
