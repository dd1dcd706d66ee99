//! IMU preintegration between keyframes.
//!
//! Measurements are integrated with the midpoint rule in the frame of the
//! first keyframe. The 9×9 covariance is ordered (rotation, velocity,
//! position) and the bias Jacobians are accumulated to first order so the
//! deltas can be corrected for small bias changes without re-integration.

mod factor;

pub use factor::{BiasWalkFactor, ImuFactor};

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::geometry::{hat, right_jacobian, Rotation};
use crate::{Error, Result};

pub type Matrix9 = SMatrix<f64, 9, 9>;

pub const STANDARD_GRAVITY: f64 = 9.81;

/// Bias changes above this magnitude are flagged as outside the first-order regime.
pub const BIAS_CORRECTION_WARN: f64 = 0.1;

pub fn default_gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -STANDARD_GRAVITY)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub timestamp_ns: i64,
    /// rad/s
    pub gyro: Vector3<f64>,
    /// Specific force, m/s²
    pub accel: Vector3<f64>,
}

/// Continuous-time noise densities and bias random walks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuNoise {
    pub gyro_noise_density: f64,
    pub accel_noise_density: f64,
    pub gyro_random_walk: f64,
    pub accel_random_walk: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            gyro_noise_density: 1.7e-4,
            accel_noise_density: 2.0e-3,
            gyro_random_walk: 1.9e-5,
            accel_random_walk: 3.0e-3,
        }
    }
}

impl ImuNoise {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_random_walk,
            self.accel_random_walk,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("IMU noise parameters must be positive: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Bias {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl Bias {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.gyro.x, self.gyro.y, self.gyro.z, self.accel.x, self.accel.y, self.accel.z]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            gyro: Vector3::new(v[0], v[1], v[2]),
            accel: Vector3::new(v[3], v[4], v[5]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PreintegratedSegment {
    pub start_ns: i64,
    pub end_ns: i64,
    pub delta_rot: Rotation,
    pub delta_vel: Vector3<f64>,
    pub delta_pos: Vector3<f64>,
    /// Seconds.
    pub dt: f64,
    pub covariance: Matrix9,
    pub d_rot_d_bg: Matrix3<f64>,
    pub d_vel_d_bg: Matrix3<f64>,
    pub d_vel_d_ba: Matrix3<f64>,
    pub d_pos_d_bg: Matrix3<f64>,
    pub d_pos_d_ba: Matrix3<f64>,
    /// Bias the measurements were corrected with.
    pub linearization_bias: Bias,
    /// Some sample interval exceeded five times the nominal period.
    pub gap_warning: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectedDeltas {
    pub delta_rot: Rotation,
    pub delta_vel: Vector3<f64>,
    pub delta_pos: Vector3<f64>,
    /// The bias change is large enough that first-order correction is unreliable.
    pub warning: bool,
}

impl PreintegratedSegment {
    fn empty(start_ns: i64, bias: Bias) -> Self {
        Self {
            start_ns,
            end_ns: start_ns,
            delta_rot: Rotation::identity(),
            delta_vel: Vector3::zeros(),
            delta_pos: Vector3::zeros(),
            dt: 0.0,
            covariance: Matrix9::zeros(),
            d_rot_d_bg: Matrix3::zeros(),
            d_vel_d_bg: Matrix3::zeros(),
            d_vel_d_ba: Matrix3::zeros(),
            d_pos_d_bg: Matrix3::zeros(),
            d_pos_d_ba: Matrix3::zeros(),
            linearization_bias: bias,
            gap_warning: false,
        }
    }

    /// First-order bias update of the deltas.
    pub fn bias_correct(&self, delta_bias: &Bias) -> CorrectedDeltas {
        let (dbg, dba) = (delta_bias.gyro, delta_bias.accel);
        let warning = dbg.norm().max(dba.norm()) > BIAS_CORRECTION_WARN;
        CorrectedDeltas {
            delta_rot: self.delta_rot.plus(&(self.d_rot_d_bg * dbg)),
            delta_vel: self.delta_vel + self.d_vel_d_bg * dbg + self.d_vel_d_ba * dba,
            delta_pos: self.delta_pos + self.d_pos_d_bg * dbg + self.d_pos_d_ba * dba,
            warning,
        }
    }

    /// Deltas over the concatenation `self` followed by `next` (noiseless composition).
    pub fn compose_deltas(&self, next: &PreintegratedSegment) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        let rot = self.delta_rot.compose(&next.delta_rot);
        let vel = self.delta_vel + self.delta_rot.rotate(&next.delta_vel);
        let pos = self.delta_pos + self.delta_vel * next.dt + self.delta_rot.rotate(&next.delta_pos);
        (rot, vel, pos)
    }
}

fn nominal_period(samples: &[ImuSample]) -> f64 {
    let mut d: Vec<i64> = samples.windows(2).map(|w| w[1].timestamp_ns - w[0].timestamp_ns).collect();
    d.sort_unstable();
    d[d.len() / 2] as f64
}

/// Preintegrates consecutive samples from the first to the last timestamp.
pub fn preintegrate(samples: &[ImuSample], bias: &Bias, noise: &ImuNoise) -> Result<PreintegratedSegment> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput("preintegration needs at least one sample interval".into()));
    }
    if let Some(w) = samples.windows(2).find(|w| w[1].timestamp_ns <= w[0].timestamp_ns) {
        return Err(Error::InvalidInput(format!(
            "IMU timestamps not strictly increasing at {} -> {}",
            w[0].timestamp_ns, w[1].timestamp_ns
        )));
    }
    let nominal = nominal_period(samples);
    let mut seg = PreintegratedSegment::empty(samples[0].timestamp_ns, *bias);
    let var_g = noise.gyro_noise_density.powi(2);
    let var_a = noise.accel_noise_density.powi(2);
    for w in samples.windows(2) {
        let (s0, s1) = (&w[0], &w[1]);
        let step_ns = s1.timestamp_ns - s0.timestamp_ns;
        if step_ns as f64 > 5.0 * nominal {
            seg.gap_warning = true;
        }
        let dt = step_ns as f64 * 1e-9;
        let omega = 0.5 * (s0.gyro + s1.gyro) - bias.gyro;
        let a0 = s0.accel - bias.accel;
        let a1 = s1.accel - bias.accel;

        let phi = omega * dt;
        let step_rot = Rotation::exp(&phi);
        let step_rt = step_rot.matrix().transpose();
        let jr = right_jacobian(&phi);
        let r0 = seg.delta_rot.matrix();
        let rot1 = seg.delta_rot.compose(&step_rot);
        let r1 = rot1.matrix();
        let acc = 0.5 * (r0 * a0 + r1 * a1);

        // sensitivity of the mean acceleration to the rotation error and gyro bias
        let dacc_dphi = -0.5 * (r0 * hat(&a0) + r1 * hat(&a1) * step_rt);
        let jr_next = step_rt * seg.d_rot_d_bg - jr * dt;
        let dacc_dbg = -0.5 * (r0 * hat(&a0) * seg.d_rot_d_bg + r1 * hat(&a1) * jr_next);
        let dacc_dba = -0.5 * (r0 + r1);

        // error-state transition and noise input, order (rot, vel, pos)
        let mut a = Matrix9::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&step_rt);
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(dacc_dphi * dt));
        a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(dacc_dphi * (0.5 * dt * dt)));
        a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt));
        let mut b = SMatrix::<f64, 9, 6>::zeros();
        let dacc_dng = -0.5 * r1 * hat(&a1) * jr * dt;
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * dt));
        b.fixed_view_mut::<3, 3>(3, 0).copy_from(&(dacc_dng * dt));
        b.fixed_view_mut::<3, 3>(6, 0).copy_from(&(dacc_dng * (0.5 * dt * dt)));
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-dacc_dba * dt));
        b.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-dacc_dba * (0.5 * dt * dt)));
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        q.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * (var_g / dt)));
        q.fixed_view_mut::<3, 3>(3, 3).copy_from(&(Matrix3::identity() * (var_a / dt)));
        seg.covariance = a * seg.covariance * a.transpose() + b * q * b.transpose();

        seg.d_pos_d_bg += seg.d_vel_d_bg * dt + 0.5 * dacc_dbg * dt * dt;
        seg.d_pos_d_ba += seg.d_vel_d_ba * dt + 0.5 * dacc_dba * dt * dt;
        seg.d_vel_d_bg += dacc_dbg * dt;
        seg.d_vel_d_ba += dacc_dba * dt;
        seg.d_rot_d_bg = jr_next;

        seg.delta_pos += seg.delta_vel * dt + 0.5 * acc * dt * dt;
        seg.delta_vel += acc * dt;
        seg.delta_rot = rot1;
        seg.dt += dt;
    }
    seg.end_ns = samples[samples.len() - 1].timestamp_ns;
    seg.covariance = (seg.covariance + seg.covariance.transpose()) * 0.5;
    Ok(seg)
}

fn interpolate(a: &ImuSample, b: &ImuSample, t: i64) -> ImuSample {
    let f = (t - a.timestamp_ns) as f64 / (b.timestamp_ns - a.timestamp_ns) as f64;
    ImuSample {
        timestamp_ns: t,
        gyro: a.gyro + (b.gyro - a.gyro) * f,
        accel: a.accel + (b.accel - a.accel) * f,
    }
}

/// Samples of `stream` restricted to `[t0, t1]`, with linearly interpolated
/// samples inserted at the boundaries. `None` if the stream does not cover
/// the interval.
pub fn samples_between(stream: &[ImuSample], t0: i64, t1: i64) -> Option<Vec<ImuSample>> {
    if t1 <= t0 || stream.is_empty() || stream[0].timestamp_ns > t0 || stream[stream.len() - 1].timestamp_ns < t1 {
        return None;
    }
    let first = stream.partition_point(|s| s.timestamp_ns <= t0);
    let last = stream.partition_point(|s| s.timestamp_ns < t1);
    let mut out = Vec::with_capacity(last.saturating_sub(first) + 2);
    let s0 = &stream[first - 1];
    out.push(if s0.timestamp_ns == t0 { *s0 } else { interpolate(s0, &stream[first], t0) });
    out.extend_from_slice(&stream[first..last]);
    let s1 = &stream[last];
    out.push(if s1.timestamp_ns == t1 { *s1 } else { interpolate(&stream[last - 1], s1, t1) });
    Some(out)
}

/// Longest gap between consecutive samples inside `[t0, t1]`, in nanoseconds.
pub fn max_gap(stream: &[ImuSample], t0: i64, t1: i64) -> i64 {
    let first = stream.partition_point(|s| s.timestamp_ns < t0);
    let last = stream.partition_point(|s| s.timestamp_ns <= t1);
    let inside = &stream[first..last];
    let mut gap = 0;
    let mut prev = t0;
    for s in inside {
        gap = gap.max(s.timestamp_ns - prev);
        prev = s.timestamp_ns;
    }
    gap.max(t1 - prev)
}
