//! Fusion of monocular video keypoints and body-worn inertial sensors into
//! smooth, calibrated human motion trajectories.

// Negated comparisons are used on purpose so NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod body_model;
pub mod camera;
pub mod dual;
pub mod eval;
pub mod exec;
pub mod objective;
pub mod random;
pub mod recording;
pub mod sensor_model;
pub mod so3;
pub mod synth;
pub mod trajectory_net;
