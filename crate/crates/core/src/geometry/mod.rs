//! Poses, similarity transforms, camera models and rig calibration.

mod camera;
mod lie;
mod rig;

pub use camera::{undistort_points, CameraKind, CameraModel, RigCamera};
pub use lie::{hat, right_jacobian, right_jacobian_inv, so3_exp, RigidPose, Rotation, Similarity};
pub use rig::RigCalibration;
