//! Desk-scale whole-body teleoperation stack for a simulated bimanual mobile
//! manipulator.

pub mod bridge;
pub mod chunkpolicy;
pub mod error;
pub mod extcalib;
pub mod hapticlaw;
pub mod kinechain;
pub mod liegroup;
pub mod manipfield;
pub mod nn;
pub mod session;
pub mod simworld;

pub use error::{Error, Result};
pub use kinechain::{JacobianBlock, JointState, KinematicChain};
pub use liegroup::{exp_map, log_map, Pose, Twist6};
