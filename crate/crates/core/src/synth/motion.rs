use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector3};

use crate::geometry::{RigidPose, Rotation};
use crate::{Error, Result};

/// Full kinematic state of the device at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematics {
    pub pose: RigidPose,
    /// World frame, m/s.
    pub velocity: Vector3<f64>,
    /// World frame, m/s².
    pub acceleration: Vector3<f64>,
    /// Device frame, rad/s.
    pub angular_velocity: Vector3<f64>,
    /// Device frame, rad/s².
    pub angular_acceleration: Vector3<f64>,
}

/// A twice-differentiable device motion.
pub trait Motion: Send + Sync {
    fn kinematics(&self, t: f64) -> Kinematics;
}

/// Device axes (x right, y down, z forward) expressed in a vehicle frame
/// (x forward, y left, z up).
fn vehicle_from_device() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

/// Natural cubic spline through uniformly timed knots, one per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicSpline {
    times: Vec<f64>,
    values: Vec<Vector3<f64>>,
    second: Vec<Vector3<f64>>,
}

impl CubicSpline {
    pub fn new(times: Vec<f64>, values: Vec<Vector3<f64>>) -> Result<Self> {
        let n = times.len();
        if n < 3 || values.len() != n || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("spline needs at least 3 strictly increasing knots".into()));
        }
        // Tridiagonal system for second derivatives with zero end conditions.
        let mut second = vec![Vector3::zeros(); n];
        let mut c_prime = vec![0.0; n];
        let mut d_prime = vec![Vector3::zeros(); n];
        for i in 1..n - 1 {
            let h0 = times[i] - times[i - 1];
            let h1 = times[i + 1] - times[i];
            let rhs = ((values[i + 1] - values[i]) / h1 - (values[i] - values[i - 1]) / h0) * 6.0;
            let diag = 2.0 * (h0 + h1) - h0 * c_prime[i - 1];
            c_prime[i] = h1 / diag;
            d_prime[i] = (rhs - d_prime[i - 1] * h0) / diag;
        }
        for i in (1..n - 1).rev() {
            second[i] = d_prime[i] - second[i + 1] * c_prime[i];
        }
        Ok(Self { times, values, second })
    }

    /// Position, velocity and acceleration at `t` (clamped to the knot range).
    pub fn evaluate(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let n = self.times.len();
        let t = t.clamp(self.times[0], self.times[n - 1]);
        let i = (self.times.partition_point(|&x| x <= t).max(1) - 1).min(n - 2);
        let h = self.times[i + 1] - self.times[i];
        let a = (self.times[i + 1] - t) / h;
        let b = (t - self.times[i]) / h;
        let (y0, y1, m0, m1) = (self.values[i], self.values[i + 1], self.second[i], self.second[i + 1]);
        let p = y0 * a + y1 * b + (m0 * (a * a * a - a) + m1 * (b * b * b - b)) * (h * h / 6.0);
        let v = (y1 - y0) / h + (m1 * (3.0 * b * b - 1.0) - m0 * (3.0 * a * a - 1.0)) * (h / 6.0);
        let acc = m0 * a + m1 * b;
        (p, v, acc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PathKind {
    /// Closed lemniscate-like loop completed once over the duration.
    FigureEight { half_length_m: f64, half_width_m: f64, height_m: f64 },
    /// Interpolating spline through waypoints spread uniformly in time.
    Spline { waypoints: Vec<Vector3<f64>> },
    /// Steady forward travel with slow sway, as on a vehicle.
    Platform { speed_mps: f64, sway_m: f64, height_m: f64 },
}

impl PathKind {
    pub fn name(&self) -> &'static str {
        match self {
            PathKind::FigureEight { .. } => "figure-eight",
            PathKind::Spline { .. } => "spline",
            PathKind::Platform { .. } => "platform",
        }
    }
}

/// A path with heading along the horizontal velocity plus small pitch and
/// roll oscillations.
#[derive(Clone, Debug, PartialEq)]
pub struct PathMotion {
    pub kind: PathKind,
    pub duration_s: f64,
    spline: Option<CubicSpline>,
    pub pitch_amplitude: f64,
    pub roll_amplitude: f64,
}

impl PathMotion {
    pub fn new(kind: PathKind, duration_s: f64) -> Result<Self> {
        if !(duration_s > 0.0) {
            return Err(Error::InvalidInput(format!("duration must be positive, got {duration_s}")));
        }
        let spline = match &kind {
            PathKind::Spline { waypoints } => {
                let n = waypoints.len();
                let times = (0..n).map(|i| duration_s * i as f64 / (n - 1).max(1) as f64).collect();
                Some(CubicSpline::new(times, waypoints.clone())?)
            }
            _ => None,
        };
        Ok(Self { kind, duration_s, spline, pitch_amplitude: 0.08, roll_amplitude: 0.05 })
    }

    /// Position, velocity and acceleration of the device origin.
    pub fn translational(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        match &self.kind {
            PathKind::FigureEight { half_length_m: a, half_width_m: b, height_m: h } => {
                let w = TAU / self.duration_s;
                let (s1, c1) = (w * t).sin_cos();
                let (s2, c2) = (2.0 * w * t).sin_cos();
                let dz = 0.2;
                (
                    Vector3::new(a * s1, b * s2, h + dz * s2),
                    Vector3::new(a * w * c1, 2.0 * b * w * c2, 2.0 * dz * w * c2),
                    Vector3::new(-a * w * w * s1, -4.0 * b * w * w * s2, -4.0 * dz * w * w * s2),
                )
            }
            PathKind::Spline { .. } => self.spline.as_ref().expect("spline built in constructor").evaluate(t),
            PathKind::Platform { speed_mps: v, sway_m: s, height_m: h } => {
                let (w1, w2, w3) = (0.31, 0.23, 0.47);
                (
                    Vector3::new(v * t + s * (w1 * t).sin(), s * (w2 * t).sin(), h + 0.3 * s * (w3 * t).sin()),
                    Vector3::new(v + s * w1 * (w1 * t).cos(), s * w2 * (w2 * t).cos(), 0.3 * s * w3 * (w3 * t).cos()),
                    Vector3::new(-s * w1 * w1 * (w1 * t).sin(), -s * w2 * w2 * (w2 * t).sin(), -0.3 * s * w3 * w3 * (w3 * t).sin()),
                )
            }
        }
    }

    /// Yaw, pitch, roll and their rates.
    fn attitude(&self, t: f64) -> ([f64; 3], [f64; 3]) {
        let (_, v, a) = self.translational(t);
        let hv2 = (v.x * v.x + v.y * v.y).max(1e-12);
        let yaw = v.y.atan2(v.x);
        let yaw_rate = (v.x * a.y - v.y * a.x) / hv2;
        let (wp, wr) = (0.7, 1.1);
        let pitch = self.pitch_amplitude * (wp * t).sin();
        let pitch_rate = self.pitch_amplitude * wp * (wp * t).cos();
        let roll = self.roll_amplitude * (wr * t + 0.3).sin();
        let roll_rate = self.roll_amplitude * wr * (wr * t + 0.3).cos();
        ([yaw, pitch, roll], [yaw_rate, pitch_rate, roll_rate])
    }

    fn angular_velocity(&self, t: f64) -> Vector3<f64> {
        let ([_, pitch, roll], [dyaw, dpitch, droll]) = self.attitude(t);
        let (sp, cp) = pitch.sin_cos();
        let (sr, cr) = roll.sin_cos();
        let vehicle = Vector3::new(droll - dyaw * sp, dpitch * cr + dyaw * cp * sr, -dpitch * sr + dyaw * cp * cr);
        vehicle_from_device().transpose() * vehicle
    }
}

impl Motion for PathMotion {
    fn kinematics(&self, t: f64) -> Kinematics {
        let (p, v, a) = self.translational(t);
        let ([yaw, pitch, roll], _) = self.attitude(t);
        let r_wv = Rotation::exp(&Vector3::new(0.0, 0.0, yaw))
            .compose(&Rotation::exp(&Vector3::new(0.0, pitch, 0.0)))
            .compose(&Rotation::exp(&Vector3::new(roll, 0.0, 0.0)));
        let rotation = r_wv.compose(&Rotation::from_matrix(&vehicle_from_device()));
        let h = 1e-4;
        let angular_acceleration = (self.angular_velocity(t + h) - self.angular_velocity(t - h)) / (2.0 * h);
        Kinematics {
            pose: RigidPose::new(rotation, p),
            velocity: v,
            acceleration: a,
            angular_velocity: self.angular_velocity(t),
            angular_acceleration,
        }
    }
}

/// Motion with a fixed pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StaticMotion(pub RigidPose);

impl Motion for StaticMotion {
    fn kinematics(&self, _t: f64) -> Kinematics {
        Kinematics {
            pose: self.0,
            velocity: Vector3::zeros(),
            acceleration: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
            angular_acceleration: Vector3::zeros(),
        }
    }
}
