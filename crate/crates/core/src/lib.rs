//! Occlusion-aware consistent model predictive control.
//!
//! Several trajectory branches, one per hypothesis about hidden obstacles,
//! share a consensus prefix and are optimized in parallel with consensus
//! ADMM over per-branch augmented Lagrangians. The crate also ships a
//! deterministic closed-loop 2D simulator and the baseline planners used to
//! evaluate the method.

pub mod admm;
pub mod band;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod kinematics;
pub mod newton;
pub mod planner;
pub mod problem;
pub mod sim;
pub mod verify;

pub use error::{CmpcError, Result};
