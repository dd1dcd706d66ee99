//! Pixel reprojection residuals shared by triangulation, alignment and fusion.

use nalgebra::{DMatrix, DVector, Matrix2x3, Vector2, Vector3};

use crate::geometry::{hat, CameraModel, RigidPose};
use crate::solver::manifold::{decode_pose, decode_vec3};
use crate::solver::{Evaluation, Residual};

fn project(model: &CameraModel, p_cam: &Vector3<f64>, want: bool) -> Option<(Vector2<f64>, Option<Matrix2x3<f64>>)> {
    model.project_with_jacobian(p_cam, want).ok()
}

fn nan_eval() -> Evaluation {
    Evaluation::residual_only(DVector::from_element(2, f64::NAN))
}

/// Reprojection of a world point through a known camera pose. Block: `[point]`.
pub struct FixedPoseReprojection {
    pub camera_from_world: RigidPose,
    pub model: CameraModel,
    pub measured: Vector2<f64>,
}

impl Residual for FixedPoseReprojection {
    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], want_jacobians: bool) -> Evaluation {
        let p = decode_vec3(params[0]);
        let pc = self.camera_from_world.apply(&p);
        let Some((px, j)) = project(&self.model, &pc, want_jacobians) else { return nan_eval() };
        let r = px - self.measured;
        let jacobians = j.map(|j| {
            let jp = j * self.camera_from_world.rotation.matrix();
            vec![DMatrix::from_column_slice(2, 3, jp.as_slice())]
        });
        Evaluation {
            residual: DVector::from_column_slice(r.as_slice()),
            jacobians,
        }
    }
}

/// Reprojection of a world point observed from a device pose through a rig
/// camera. Blocks: `[world_from_device pose, point]`.
pub struct RigReprojection {
    pub camera_from_device: RigidPose,
    pub model: CameraModel,
    pub measured: Vector2<f64>,
}

impl Residual for RigReprojection {
    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], want_jacobians: bool) -> Evaluation {
        let wd = decode_pose(params[0]);
        let p = decode_vec3(params[1]);
        let r_wd_t = wd.rotation.matrix().transpose();
        let p_dev = r_wd_t * (p - wd.translation);
        let pc = self.camera_from_device.apply(&p_dev);
        let Some((px, j)) = project(&self.model, &pc, want_jacobians) else { return nan_eval() };
        let r = px - self.measured;
        let jacobians = j.map(|j| {
            let jd = j * self.camera_from_device.rotation.matrix();
            // right-perturbed rotation, additive translation
            let d_rot = jd * hat(&p_dev);
            let d_trans = -jd * r_wd_t;
            let d_point = jd * r_wd_t;
            let mut jp = DMatrix::zeros(2, 6);
            jp.view_mut((0, 0), (2, 3)).copy_from(&d_rot);
            jp.view_mut((0, 3), (2, 3)).copy_from(&d_trans);
            vec![jp, DMatrix::from_column_slice(2, 3, d_point.as_slice())]
        });
        Evaluation {
            residual: DVector::from_column_slice(r.as_slice()),
            jacobians,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::solver::manifold::encode_pose;
    use crate::solver::{check_jacobians, Manifold};

    #[test]
    fn jacobians_match_finite_differences() {
        let models = [
            CameraModel::pinhole(400.0, 410.0, 320.0, 240.0, 640, 480),
            CameraModel::radtan4(458.6, 457.3, 367.2, 248.4, [-0.28, 0.074, 1.9e-4, 1.8e-5], 752, 480),
            CameraModel::kannala_brandt4(240.0, 241.0, 320.5, 318.2, [0.021, -0.012, 0.004, -0.0007], 640, 640),
        ];
        let cam_from_dev = RigidPose::new(Rotation::exp(&Vector3::new(0.1, 1.2, -0.1)), Vector3::new(0.05, 0.0, 0.01));
        let wd = RigidPose::new(Rotation::exp(&Vector3::new(0.2, -0.1, 0.9)), Vector3::new(1.0, -2.0, 0.3));
        let point = wd.apply(&cam_from_dev.inverse().apply(&Vector3::new(0.3, -0.2, 3.0)));
        for model in models {
            let f = RigReprojection { camera_from_device: cam_from_dev, model: model.clone(), measured: Vector2::new(100.0, 90.0) };
            let err = check_jacobians(&f, &[Manifold::RigidPose, Manifold::Euclidean(3)], &[encode_pose(&wd).to_vec(), point.as_slice().to_vec()], 1e-6);
            assert!(err < 1e-5, "{:?}: {err}", model.kind);
            let f = FixedPoseReprojection { camera_from_world: cam_from_dev.compose(&wd.inverse()), model, measured: Vector2::zeros() };
            let err = check_jacobians(&f, &[Manifold::Euclidean(3)], &[point.as_slice().to_vec()], 1e-6);
            assert!(err < 1e-5);
        }
    }
}
