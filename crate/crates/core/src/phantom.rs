//! Hidden-world simulation: ground-truth eye, tool kinematic state, top-down
//! camera, synthetic depth oracle, head drift, scleral force, and collision
//! detection.
//!
//! Frames and units: everything is expressed in millimetres in the robot base
//! frame. The microscope looks straight down the `-z` axis; the retina is the
//! lower inner wall of the retinal ellipsoid, and the instrument works inside
//! the vitreous cavity (the ellipsoid interior).

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ellipsoid;
use crate::image::GrayImage;
use crate::so3;

/// Half of the 0.1 mm outer diameter of the needle.
pub const TOOL_TIP_RADIUS: f64 = 0.05;

/// Maximum inter-sample spacing used when checking a path for contact.
pub const COLLISION_SUBSAMPLE_MM: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("goal off retina")]
    GoalOffRetina,
    #[error("drift exceeds simulated range: ({dx:.4}, {dy:.4}) mm, limit {limit} mm")]
    DriftOutOfRange { dx: f64, dy: f64, limit: f64 },
    #[error("invalid phantom: {0}")]
    InvalidPhantom(String),
    #[error("invalid oracle configuration: {0}")]
    InvalidOracle(String),
}

/// Kinematic state of the instrument tip: position, orientation (third
/// column is the shaft direction, pointing from the tip toward the handle),
/// linear and angular velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToolState {
    pub p: Vector3<f64>,
    pub r: Matrix3<f64>,
    pub v: Vector3<f64>,
    pub w: Vector3<f64>,
}

impl ToolState {
    pub fn at_rest(p: Vector3<f64>, r: Matrix3<f64>) -> Self {
        Self {
            p,
            r,
            v: Vector3::zeros(),
            w: Vector3::zeros(),
        }
    }

    /// Tool at rest at `tip` with its shaft passing through `pivot`.
    pub fn through_pivot(tip: Vector3<f64>, pivot: Vector3<f64>) -> Self {
        Self::at_rest(tip, so3::frame_with_z(&(pivot - tip)))
    }

    pub fn shaft_axis(&self) -> Vector3<f64> {
        self.r.column(2).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraModel {
    pub mm_per_px: f64,
    pub width_px: usize,
    pub height_px: usize,
    /// World XY (mm) imaged at the image center.
    pub view_origin: [f64; 2],
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            mm_per_px: 0.022,
            width_px: 640,
            height_px: 480,
            view_origin: [0.0, 0.0],
        }
    }
}

impl CameraModel {
    pub fn center_px(&self) -> Vector2<f64> {
        Vector2::new(
            (self.width_px as f64 - 1.0) * 0.5,
            (self.height_px as f64 - 1.0) * 0.5,
        )
    }

    /// Orthographic projection of a world point onto the image plane.
    pub fn world_to_px(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let c = self.center_px();
        Vector2::new(
            (p[0] - self.view_origin[0]) / self.mm_per_px + c[0],
            (p[1] - self.view_origin[1]) / self.mm_per_px + c[1],
        )
    }

    pub fn px_to_world_xy(&self, px: &Vector2<f64>) -> Vector2<f64> {
        let c = self.center_px();
        Vector2::new(
            (px[0] - c[0]) * self.mm_per_px + self.view_origin[0],
            (px[1] - c[1]) * self.mm_per_px + self.view_origin[1],
        )
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px[0] >= 0.0
            && px[1] >= 0.0
            && px[0] <= self.width_px as f64 - 1.0
            && px[1] <= self.height_px as f64 - 1.0
    }
}

/// One breakpoint of the distance-dependent noise table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaBreakpoint {
    pub distance_mm: f64,
    pub sigma_mm: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub sigma_table: Vec<SigmaBreakpoint>,
    pub bin_mm: f64,
    pub seed: u64,
    pub bias_mm: [f64; 3],
}

impl Default for OracleConfig {
    /// Per-axis noise growing with distance, a few hundredths of a millimetre
    /// in the last millimetre and ~0.3 mm at 10 mm; averaged over a 0-10 mm
    /// approach this gives mean absolute errors of roughly 0.14/0.10/0.15 mm.
    fn default() -> Self {
        Self {
            sigma_table: vec![
                SigmaBreakpoint { distance_mm: 0.0, sigma_mm: [0.03, 0.03, 0.04] },
                SigmaBreakpoint { distance_mm: 1.0, sigma_mm: [0.05, 0.04, 0.06] },
                SigmaBreakpoint { distance_mm: 3.0, sigma_mm: [0.10, 0.07, 0.10] },
                SigmaBreakpoint { distance_mm: 6.0, sigma_mm: [0.21, 0.15, 0.22] },
                SigmaBreakpoint { distance_mm: 10.0, sigma_mm: [0.34, 0.24, 0.35] },
            ],
            bin_mm: 0.02,
            seed: 7,
            bias_mm: [0.0; 3],
        }
    }
}

impl OracleConfig {
    pub fn noiseless() -> Self {
        Self {
            sigma_table: vec![SigmaBreakpoint { distance_mm: 0.0, sigma_mm: [0.0; 3] }],
            ..Self::default()
        }
    }

    /// Same table with every sigma multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for bp in &mut out.sigma_table {
            for s in &mut bp.sigma_mm {
                *s *= factor;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.bin_mm > 0.0) {
            return Err(SimError::InvalidOracle("bin_mm must be positive".into()));
        }
        if self.sigma_table.is_empty() {
            return Err(SimError::InvalidOracle("empty sigma table".into()));
        }
        for pair in self.sigma_table.windows(2) {
            if pair[1].distance_mm <= pair[0].distance_mm {
                return Err(SimError::InvalidOracle(
                    "sigma table distances must increase".into(),
                ));
            }
            for axis in 0..3 {
                if pair[1].sigma_mm[axis] < pair[0].sigma_mm[axis] {
                    return Err(SimError::InvalidOracle(
                        "sigma must be non-decreasing in distance".into(),
                    ));
                }
            }
        }
        if self
            .sigma_table
            .iter()
            .any(|bp| bp.sigma_mm.iter().any(|s| *s < 0.0 || !s.is_finite()))
        {
            return Err(SimError::InvalidOracle("sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Piecewise-linear interpolation of the per-axis sigma, clamped at the
    /// table ends.
    pub fn sigma_at(&self, distance: f64) -> Vector3<f64> {
        let table = &self.sigma_table;
        let first = &table[0];
        if distance <= first.distance_mm || table.len() == 1 {
            return Vector3::from(first.sigma_mm);
        }
        for pair in table.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if distance <= b.distance_mm {
                let t = (distance - a.distance_mm) / (b.distance_mm - a.distance_mm);
                return Vector3::from(a.sigma_mm) * (1.0 - t) + Vector3::from(b.sigma_mm) * t;
            }
        }
        Vector3::from(table[table.len() - 1].sigma_mm)
    }

    /// Scalar per-point sigma used for least-squares weights; floored at the
    /// quantization noise of one bin.
    pub fn scalar_sigma_at(&self, distance: f64) -> f64 {
        let s = self.sigma_at(distance);
        let rms = (s.norm_squared() / 3.0).sqrt();
        rms.max(self.bin_mm / 12f64.sqrt())
    }

    pub fn quantize(&self, v: f64) -> f64 {
        (v / self.bin_mm).round() * self.bin_mm
    }
}

/// Human-readable phantom description (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub retina_center: [f64; 3],
    pub retina_semi_axes: [f64; 3],
    /// Axis-angle (radians) of the ellipsoid principal frame.
    pub rotation_axis_angle: [f64; 3],
    pub sclera_thickness_mm: f64,
    /// Direction, in the ellipsoid frame, along which the incision point is
    /// placed on the scleral surface.
    pub incision_direction: [f64; 3],
    pub texture_seed: u64,
    pub drift_range_mm: f64,
    /// Scleral spring constant, mN/mm.
    pub k_s: f64,
    pub camera: CameraModel,
    pub oracle: OracleConfig,
}

/// Spring constant obtained by `calibrate-force` on the reference seed.
pub const CALIBRATED_K_S: f64 = 77.0;

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            retina_center: [0.0, 0.0, 0.0],
            retina_semi_axes: [12.0, 12.0, 12.0],
            rotation_axis_angle: [0.0, 0.0, 0.0],
            sclera_thickness_mm: 1.0,
            incision_direction: [0.766_044_443_118_978, 0.0, 0.642_787_609_686_539_3],
            texture_seed: 11,
            drift_range_mm: 0.25,
            k_s: CALIBRATED_K_S,
            camera: CameraModel::default(),
            oracle: OracleConfig::default(),
        }
    }
}

impl PhantomConfig {
    pub fn phantom(&self) -> Result<EyePhantom, SimError> {
        EyePhantom::new(
            Vector3::from(self.retina_center),
            Vector3::from(self.retina_semi_axes),
            so3::exp(&Vector3::from(self.rotation_axis_angle)),
            self.sclera_thickness_mm,
            Vector3::from(self.incision_direction),
            self.texture_seed,
            self.drift_range_mm,
        )
    }
}

/// Ground-truth eye.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyePhantom {
    pub retina_center: Vector3<f64>,
    pub retina_semi_axes: Vector3<f64>,
    pub retina_rotation: Matrix3<f64>,
    pub sclera_thickness: f64,
    pub incision_point: Vector3<f64>,
    pub texture_seed: u64,
    pub drift_offset: Vector2<f64>,
    pub drift_range: f64,
}

impl EyePhantom {
    pub fn new(
        retina_center: Vector3<f64>,
        retina_semi_axes: Vector3<f64>,
        retina_rotation: Matrix3<f64>,
        sclera_thickness: f64,
        incision_direction: Vector3<f64>,
        texture_seed: u64,
        drift_range: f64,
    ) -> Result<Self, SimError> {
        if retina_semi_axes.iter().any(|a| !(8.0..=14.0).contains(a)) {
            return Err(SimError::InvalidPhantom(format!(
                "semi-axes {:?} outside [8, 14] mm",
                retina_semi_axes.as_slice()
            )));
        }
        if so3::orthonormality_defect(&retina_rotation) >= 1e-10
            || (retina_rotation.determinant() - 1.0).abs() >= 1e-10
        {
            return Err(SimError::InvalidPhantom("rotation is not proper orthonormal".into()));
        }
        if !(sclera_thickness > 0.0) {
            return Err(SimError::InvalidPhantom("sclera thickness must be positive".into()));
        }
        if !(drift_range >= 0.0) {
            return Err(SimError::InvalidPhantom("drift range must be non-negative".into()));
        }
        let dir = incision_direction;
        if dir.norm() == 0.0 {
            return Err(SimError::InvalidPhantom("zero incision direction".into()));
        }
        let outer = retina_semi_axes.add_scalar(sclera_thickness);
        let scale = 1.0 / dir.component_div(&outer).norm();
        let incision_point = retina_center + retina_rotation * (dir * scale);
        let phantom = Self {
            retina_center,
            retina_semi_axes,
            retina_rotation,
            sclera_thickness,
            incision_point,
            texture_seed,
            drift_offset: Vector2::zeros(),
            drift_range,
        };
        let off = phantom.sclera_signed_distance(&phantom.incision_point).abs();
        if off > 1e-6 {
            return Err(SimError::InvalidPhantom(format!(
                "incision point {off:e} mm off the scleral surface"
            )));
        }
        Ok(phantom)
    }

    fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.retina_rotation.transpose() * (p - self.retina_center)
    }

    pub fn sclera_semi_axes(&self) -> Vector3<f64> {
        self.retina_semi_axes.add_scalar(self.sclera_thickness)
    }

    pub fn sclera_signed_distance(&self, p: &Vector3<f64>) -> f64 {
        ellipsoid::signed_distance(&self.sclera_semi_axes(), &self.to_local(p))
    }

    /// Signed distance to the retinal surface: positive inside the vitreous
    /// cavity, negative past the retina.
    pub fn surface_signed_distance(&self, p: &Vector3<f64>) -> f64 {
        ellipsoid::signed_distance(&self.retina_semi_axes, &self.to_local(p))
    }

    /// Lower intersection of the vertical line through world `(x, y)` with the
    /// retina: the fundus point the microscope sees at that location.
    pub fn retina_point_below(&self, xy: &Vector2<f64>) -> Option<Vector3<f64>> {
        let origin = Vector3::new(xy[0], xy[1], self.retina_center[2]);
        let q0 = self.to_local(&origin);
        let d = self.retina_rotation.transpose() * Vector3::z();
        let inv = self.retina_semi_axes.map(|a| 1.0 / (a * a));
        let a = d.component_mul(&d).dot(&inv);
        let b = 2.0 * q0.component_mul(&d).dot(&inv);
        let c = q0.component_mul(&q0).dot(&inv) - 1.0;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let t = (-b - disc.sqrt()) / (2.0 * a);
        Some(origin + Vector3::z() * t)
    }

    pub fn goal_point(&self, goal_px: &Vector2<f64>, cam: &CameraModel) -> Result<Vector3<f64>, SimError> {
        if !cam.contains(goal_px) {
            return Err(SimError::GoalOffRetina);
        }
        self.retina_point_below(&cam.px_to_world_xy(goal_px))
            .ok_or(SimError::GoalOffRetina)
    }

    /// Rigid XY translation of the whole eye.
    pub fn apply_drift(&mut self, delta: Vector2<f64>) -> Result<(), SimError> {
        let limit = self.drift_range;
        if delta[0].abs() > limit + 1e-12 || delta[1].abs() > limit + 1e-12 || !delta.iter().all(|d| d.is_finite()) {
            return Err(SimError::DriftOutOfRange {
                dx: delta[0],
                dy: delta[1],
                limit,
            });
        }
        let shift = Vector3::new(delta[0], delta[1], 0.0);
        self.drift_offset += delta;
        self.retina_center += shift;
        self.incision_point += shift;
        Ok(())
    }

    /// Fundus intensity at a world XY location. The pattern is attached to
    /// the eye, so drift translates it rigidly.
    pub fn fundus_intensity(&self, xy: &Vector2<f64>) -> f64 {
        let x = xy[0] - self.retina_center[0];
        let y = xy[1] - self.retina_center[1];
        fundus_texture(self.texture_seed, x, y)
    }
}

// ---------------------------------------------------------------------------
// Fundus texture: smooth value noise plus vessel-like dark streaks.

fn hash2(seed: u64, ix: i64, iy: i64) -> f64 {
    let mut z = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let fx = x.floor();
    let fy = y.floor();
    let (ix, iy) = (fx as i64, fy as i64);
    let tx = x - fx;
    let ty = y - fy;
    // Quintic fade keeps the field C2 so gradients are smooth.
    let sx = tx * tx * tx * (tx * (tx * 6.0 - 15.0) + 10.0);
    let sy = ty * ty * ty * (ty * (ty * 6.0 - 15.0) + 10.0);
    let v00 = hash2(seed, ix, iy);
    let v10 = hash2(seed, ix + 1, iy);
    let v01 = hash2(seed, ix, iy + 1);
    let v11 = hash2(seed, ix + 1, iy + 1);
    let a = v00 + (v10 - v00) * sx;
    let b = v01 + (v11 - v01) * sx;
    a + (b - a) * sy
}

struct Vessel {
    cos: f64,
    sin: f64,
    offset: f64,
    amplitude: f64,
    wavenumber: f64,
    phase: f64,
    width: f64,
}

fn vessels(seed: u64) -> Vec<Vessel> {
    (0..7)
        .map(|k| {
            let h = |j: i64| hash2(seed ^ 0x5EED, k, j);
            let angle = h(0) * std::f64::consts::PI;
            Vessel {
                cos: angle.cos(),
                sin: angle.sin(),
                offset: (h(1) - 0.5) * 8.0,
                amplitude: 0.2 + 0.6 * h(2),
                wavenumber: 0.6 + 1.2 * h(3),
                phase: h(4) * std::f64::consts::TAU,
                width: 0.035 + 0.05 * h(5),
            }
        })
        .collect()
}

/// Intensity in roughly [50, 215]; coordinates in mm relative to the eye.
pub fn fundus_texture(seed: u64, x: f64, y: f64) -> f64 {
    let n = 0.5 * value_noise(seed, x / 0.40, y / 0.40)
        + 0.3 * value_noise(seed.wrapping_add(1), x / 0.18, y / 0.18)
        + 0.2 * value_noise(seed.wrapping_add(2), x / 0.09, y / 0.09);
    let mut v = 70.0 + 140.0 * n;
    for vessel in vessels(seed) {
        let u = x * vessel.cos + y * vessel.sin;
        let w = -x * vessel.sin + y * vessel.cos;
        let centerline = vessel.offset + vessel.amplitude * (vessel.wavenumber * u + vessel.phase).sin();
        let d = (w - centerline) / vessel.width;
        v -= 55.0 * (-d * d).exp();
    }
    v.clamp(0.0, 230.0)
}

// ---------------------------------------------------------------------------
// Rendering.

pub const TOOL_GRAY: u8 = 20;
pub const TIP_MARKER_GRAY: u8 = 255;
const SHAFT_HALF_WIDTH_PX: f64 = 2.5;
const TIP_MARKER_RADIUS_PX: f64 = 3.0;
const SHAFT_LENGTH_MM: f64 = 40.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub image: GrayImage,
    pub timestamp: f64,
    pub ground_truth_tip_px: Vector2<f64>,
}

/// Orthographic top-down view. A pure function of its inputs.
pub fn render_topdown(phantom: &EyePhantom, tool: &ToolState, cam: &CameraModel, timestamp: f64) -> SceneFrame {
    let tip_px = cam.world_to_px(&tool.p);
    let tail = tool.p + tool.shaft_axis() * SHAFT_LENGTH_MM;
    let tail_px = cam.world_to_px(&tail);
    let seg = tail_px - tip_px;
    let seg_len2 = seg.norm_squared();

    let image = GrayImage::from_fn(cam.width_px, cam.height_px, |x, y| {
        let px = Vector2::new(x as f64, y as f64);
        if (px - tip_px).norm() <= TIP_MARKER_RADIUS_PX {
            return TIP_MARKER_GRAY;
        }
        if seg_len2 > 0.0 {
            let t = ((px - tip_px).dot(&seg) / seg_len2).clamp(0.0, 1.0);
            if t > 0.0 && (px - (tip_px + seg * t)).norm() <= SHAFT_HALF_WIDTH_PX {
                return TOOL_GRAY;
            }
        }
        let xy = cam.px_to_world_xy(&px);
        phantom.fundus_intensity(&xy).round() as u8
    });

    SceneFrame {
        image,
        timestamp,
        ground_truth_tip_px: tip_px,
    }
}

// ---------------------------------------------------------------------------
// Depth oracle.

/// Stand-in for the learned depth network: returns the vector from the tool
/// tip to the retinal point under the goal pixel, corrupted with
/// distance-dependent Gaussian noise, biased, and quantized to bins.
#[derive(Debug, Clone)]
pub struct DepthOracle {
    cfg: OracleConfig,
    rng: ChaCha8Rng,
}

impl DepthOracle {
    pub fn new(cfg: OracleConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { cfg, rng })
    }

    /// Independent stream derived from the base seed (for trials and runs).
    pub fn with_stream(cfg: OracleConfig, stream: u64) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        Ok(Self { cfg, rng })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    pub fn predict(
        &mut self,
        tip: &Vector3<f64>,
        goal_px: &Vector2<f64>,
        phantom: &EyePhantom,
        cam: &CameraModel,
    ) -> Result<Vector3<f64>, SimError> {
        let goal = phantom.goal_point(goal_px, cam)?;
        let d_true = goal - tip;
        let sigma = self.cfg.sigma_at(d_true.norm());
        let mut out = Vector3::zeros();
        for axis in 0..3 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            let noisy = d_true[axis] + self.cfg.bias_mm[axis] + sigma[axis] * z;
            out[axis] = self.cfg.quantize(noisy);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Scleral force and contact.

/// Lateral offset of the incision point from the tool shaft line, measured
/// in the horizontal plane through the incision point.
pub fn shaft_offset_xy(tool: &ToolState, incision: &Vector3<f64>) -> Vector2<f64> {
    let axis = tool.shaft_axis();
    let foot = if axis[2].abs() > 1e-9 {
        let t = (incision[2] - tool.p[2]) / axis[2];
        tool.p + axis * t
    } else {
        tool.p + axis * axis.dot(&(incision - tool.p))
    };
    let e = incision - foot;
    Vector2::new(e[0], e[1])
}

/// Spring model of the force on the sclera, mN.
pub fn scleral_force(tool: &ToolState, phantom: &EyePhantom, k_s: f64) -> Vector2<f64> {
    shaft_offset_xy(tool, &phantom.incision_point) * k_s
}

/// True if any point of the polyline comes closer to the retina than the
/// tool-tip radius.
pub fn collision_check(segment: &[Vector3<f64>], phantom: &EyePhantom) -> bool {
    let hit = |p: &Vector3<f64>| phantom.surface_signed_distance(p) < TOOL_TIP_RADIUS;
    match segment {
        [] => false,
        [single] => hit(single),
        _ => {
            if hit(&segment[0]) {
                return true;
            }
            segment.windows(2).any(|pair| {
                let delta = pair[1] - pair[0];
                let n = ((delta.norm() / COLLISION_SUBSAMPLE_MM).ceil() as usize).max(1);
                (1..=n).any(|i| hit(&(pair[0] + delta * (i as f64 / n as f64))))
            })
        }
    }
}
