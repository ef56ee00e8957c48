//! Simulation and control stack for autonomous subretinal needle navigation
//! under a top-down microscope.
//!
//! The crate is organised bottom-up:
//!
//! * [`phantom`]: the hidden world (eye, tool, camera, depth oracle, force).
//! * [`geometry`]: ellipsoid fitting of the retina from noisy depth vectors.
//! * [`chance`]: probabilistic collision margin from the fit uncertainty.
//! * [`ddp`]: constrained trajectory optimization on SE(3) x R^6.
//! * [`mpc`]: the receding-horizon navigation loop and the direct baseline.
//! * [`flow`]: sparse optical flow for head-drift compensation.
//! * [`harness`]: experiment configuration, batch runs and metrics.

// Negated comparisons are used deliberately so NaN inputs fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chance;
pub mod ddp;
pub mod ellipsoid;
pub mod flow;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod mpc;
pub mod phantom;
pub mod so3;

pub use phantom::{CameraModel, DepthOracle, EyePhantom, OracleConfig, PhantomConfig, SimError, ToolState};
