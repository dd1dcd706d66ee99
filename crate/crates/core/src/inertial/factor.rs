use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};

use super::{Bias, PreintegratedSegment};
use crate::geometry::{hat, right_jacobian, right_jacobian_inv, RigidPose};
use crate::solver::manifold::{decode_pose, decode_vec3};
use crate::solver::{Evaluation, Residual};

/// Preintegration residual between two keyframes.
///
/// Blocks: `[pose_i, velocity_i, bias_i, pose_j, velocity_j]` where poses are
/// world-from-device rigid poses, velocities are IMU-origin velocities in the
/// world frame and biases are `[b_g, b_a]`. Residual order is
/// (rotation, velocity, position).
pub struct ImuFactor {
    pub segment: PreintegratedSegment,
    pub gravity: Vector3<f64>,
    /// Pose of the IMU in the device frame.
    pub device_from_imu: RigidPose,
}

type M3 = Matrix3<f64>;

impl ImuFactor {
    pub fn new(segment: PreintegratedSegment, gravity: Vector3<f64>, imu_from_device: RigidPose) -> Self {
        Self {
            segment,
            gravity,
            device_from_imu: imu_from_device.inverse(),
        }
    }

    fn imu_pose(&self, world_from_device: &RigidPose) -> RigidPose {
        world_from_device.compose(&self.device_from_imu)
    }

    /// Residual with the Jacobians with respect to the IMU-frame states.
    #[allow(clippy::type_complexity)]
    fn evaluate_imu(
        &self,
        ti: &RigidPose,
        vi: &Vector3<f64>,
        bi: &Bias,
        tj: &RigidPose,
        vj: &Vector3<f64>,
    ) -> (SMatrix<f64, 9, 1>, [SMatrix<f64, 9, 3>; 8]) {
        let seg = &self.segment;
        let dbg = bi.gyro - seg.linearization_bias.gyro;
        let dba = bi.accel - seg.linearization_bias.accel;
        let corr = seg.bias_correct(&Bias { gyro: dbg, accel: dba });
        let dt = seg.dt;
        let g = self.gravity;

        let ri = ti.rotation.matrix();
        let rit = ri.transpose();
        let err_rot = corr.delta_rot.inverse().compose(&ti.rotation.inverse()).compose(&tj.rotation);
        let r_rot = err_rot.log();
        let dv_world = vj - vi - g * dt;
        let dp_world = tj.translation - ti.translation - vi * dt - 0.5 * g * dt * dt;
        let r_vel = rit * dv_world - corr.delta_vel;
        let r_pos = rit * dp_world - corr.delta_pos;

        let mut r = SMatrix::<f64, 9, 1>::zeros();
        r.fixed_rows_mut::<3>(0).copy_from(&r_rot);
        r.fixed_rows_mut::<3>(3).copy_from(&r_vel);
        r.fixed_rows_mut::<3>(6).copy_from(&r_pos);

        let jr_inv = right_jacobian_inv(&r_rot);
        let rj = tj.rotation.matrix();
        let stack = |a: M3, b: M3, c: M3| {
            let mut m = SMatrix::<f64, 9, 3>::zeros();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&a);
            m.fixed_view_mut::<3, 3>(3, 0).copy_from(&b);
            m.fixed_view_mut::<3, 3>(6, 0).copy_from(&c);
            m
        };
        let z = M3::zeros();
        let d_rot_i = stack(-jr_inv * rj.transpose() * ri, hat(&(rit * dv_world)), hat(&(rit * dp_world)));
        let d_pos_i = stack(z, z, -rit);
        let d_vel_i = stack(z, -rit, -rit * dt);
        let d_rot_bg = -jr_inv * err_rot.inverse().matrix() * right_jacobian(&(seg.d_rot_d_bg * dbg)) * seg.d_rot_d_bg;
        let d_bg = stack(d_rot_bg, -seg.d_vel_d_bg, -seg.d_pos_d_bg);
        let d_ba = stack(z, -seg.d_vel_d_ba, -seg.d_pos_d_ba);
        let d_rot_j = stack(jr_inv, z, z);
        let d_pos_j = stack(z, z, rit);
        let d_vel_j = stack(z, rit, z);
        (r, [d_rot_i, d_pos_i, d_vel_i, d_bg, d_ba, d_rot_j, d_pos_j, d_vel_j])
    }

    /// Maps Jacobians w.r.t. the IMU pose onto the device-pose tangent.
    fn device_pose_jacobian(&self, world_from_device: &RigidPose, d_rot: &SMatrix<f64, 9, 3>, d_pos: &SMatrix<f64, 9, 3>) -> DMatrix<f64> {
        let r_di = self.device_from_imu.rotation.matrix();
        let rwd = world_from_device.rotation.matrix();
        let t_di = self.device_from_imu.translation;
        let rot_cols = d_rot * r_di.transpose() - d_pos * rwd * hat(&t_di);
        let mut j = DMatrix::zeros(9, 6);
        j.view_mut((0, 0), (9, 3)).copy_from(&rot_cols);
        j.view_mut((0, 3), (9, 3)).copy_from(d_pos);
        j
    }

    pub fn residual_at(&self, world_from_device_i: &RigidPose, vi: &Vector3<f64>, bi: &Bias, world_from_device_j: &RigidPose, vj: &Vector3<f64>) -> SMatrix<f64, 9, 1> {
        let ti = self.imu_pose(world_from_device_i);
        let tj = self.imu_pose(world_from_device_j);
        self.evaluate_imu(&ti, vi, bi, &tj, vj).0
    }
}

impl Residual for ImuFactor {
    fn dim(&self) -> usize {
        9
    }

    fn evaluate(&self, params: &[&[f64]], want_jacobians: bool) -> Evaluation {
        let dev_i = decode_pose(params[0]);
        let vi = decode_vec3(params[1]);
        let bi = Bias::from_slice(params[2]);
        let dev_j = decode_pose(params[3]);
        let vj = decode_vec3(params[4]);
        let ti = self.imu_pose(&dev_i);
        let tj = self.imu_pose(&dev_j);
        let (r, j) = self.evaluate_imu(&ti, &vi, &bi, &tj, &vj);
        let residual = DVector::from_column_slice(r.as_slice());
        if !want_jacobians {
            return Evaluation::residual_only(residual);
        }
        let [d_rot_i, d_pos_i, d_vel_i, d_bg, d_ba, d_rot_j, d_pos_j, d_vel_j] = j;
        let mut bias = DMatrix::zeros(9, 6);
        bias.view_mut((0, 0), (9, 3)).copy_from(&d_bg);
        bias.view_mut((0, 3), (9, 3)).copy_from(&d_ba);
        let jacobians = vec![
            self.device_pose_jacobian(&dev_i, &d_rot_i, &d_pos_i),
            DMatrix::from_column_slice(9, 3, d_vel_i.as_slice()),
            bias,
            self.device_pose_jacobian(&dev_j, &d_rot_j, &d_pos_j),
            DMatrix::from_column_slice(9, 3, d_vel_j.as_slice()),
        ];
        Evaluation {
            residual,
            jacobians: Some(jacobians),
        }
    }
}

/// Bias random-walk residual `b_j − b_i` over blocks `[bias_i, bias_j]`.
pub struct BiasWalkFactor;

impl BiasWalkFactor {
    /// Covariance of the random walk over `dt` seconds.
    pub fn covariance(noise: &super::ImuNoise, dt: f64) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(6, 6);
        for k in 0..3 {
            c[(k, k)] = noise.gyro_random_walk.powi(2) * dt;
            c[(k + 3, k + 3)] = noise.accel_random_walk.powi(2) * dt;
        }
        c
    }
}

impl Residual for BiasWalkFactor {
    fn dim(&self) -> usize {
        6
    }

    fn evaluate(&self, params: &[&[f64]], want_jacobians: bool) -> Evaluation {
        let r = DVector::from_iterator(6, (0..6).map(|k| params[1][k] - params[0][k]));
        let jacobians = want_jacobians.then(|| vec![-DMatrix::identity(6, 6), DMatrix::identity(6, 6)]);
        Evaluation { residual: r, jacobians }
    }
}

