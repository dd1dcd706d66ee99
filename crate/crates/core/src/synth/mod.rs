//! Synthetic worlds with known ground truth: trajectories, control points,
//! landmarks, detections and IMU streams.

mod motion;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use motion::{CubicSpline, Kinematics, Motion, PathKind, PathMotion, StaticMotion};

use crate::alignment::ControlPoint;
use crate::geometry::{CameraModel, RigCalibration, RigCamera, RigidPose, Rotation};
use crate::inertial::{default_gravity, Bias, ImuNoise, ImuSample};
use crate::trajectory::{StampedPose, Trajectory};
use crate::triangulation::{FeatureTrack, Observation, DEFAULT_DETECTION_SIGMA_PX};
use crate::{Error, Result};

const STREAM_WORLD: u64 = 1;
const STREAM_CP_NOISE: u64 = 2;
const STREAM_DETECTIONS: u64 = 3;
const STREAM_IMU: u64 = 4;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Two fisheye cameras looking forward-left and forward-right with a narrow
/// shared field of view, and an IMU slightly offset from the device origin.
pub fn default_rig() -> RigCalibration {
    let model = CameraModel::kannala_brandt4(190.0, 190.0, 320.0, 320.0, [0.01, -0.005, 0.001, -0.0002], 640, 640);
    let camera = |id: &str, yaw: f64, x: f64| {
        let device_from_camera = RigidPose::new(Rotation::exp(&Vector3::new(0.0, yaw, 0.0)), Vector3::new(x, 0.0, 0.0));
        RigCamera { id: id.into(), model: model.clone(), camera_from_device: device_from_camera.inverse() }
    };
    RigCalibration {
        cameras: vec![camera("cam0", -1.0, -0.05), camera("cam1", 1.0, 0.05)],
        imu_from_device: RigidPose::new(Rotation::exp(&Vector3::new(0.01, -0.02, 0.015)), Vector3::new(0.01, -0.02, 0.005)),
        imu_noise: ImuNoise::default(),
    }
}

/// Which points a camera sees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Visibility {
    pub min_range_m: f64,
    pub max_range_m: f64,
    /// Largest angle from the optical axis.
    pub max_angle_deg: f64,
}

impl Default for Visibility {
    fn default() -> Self {
        Self { min_range_m: 0.5, max_range_m: 25.0, max_angle_deg: 75.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub path: PathKind,
    pub camera_rate_hz: f64,
    pub imu_rate_hz: f64,
    pub cp_count: usize,
    /// Share of control points surveyed horizontally only.
    pub cp_fraction_2d: f64,
    /// Lateral distance range of control points from the path, meters.
    pub cp_lateral_m: (f64, f64),
    pub cp_sigma_xy: f64,
    pub cp_sigma_z: f64,
    /// Perturb surveyed positions by their stated covariance.
    pub cp_measurement_noise: bool,
    pub landmark_count: usize,
    pub detection_sigma_px: f64,
    pub feature_sigma_px: f64,
    /// Feature tracks are observed on every n-th camera frame.
    pub feature_stride: usize,
    pub visibility: Visibility,
    pub imu_noise_enabled: bool,
    pub bias: Bias,
    pub gravity: Vector3<f64>,
    pub rig: RigCalibration,
}

impl SynthConfig {
    /// 60 s walking loop with a mixed set of control points and no noise.
    pub fn figure8(seed: u64) -> Self {
        Self {
            seed,
            duration_s: 60.0,
            path: PathKind::FigureEight { half_length_m: 12.0, half_width_m: 6.0, height_m: 1.5 },
            camera_rate_hz: 20.0,
            imu_rate_hz: 1000.0,
            cp_count: 12,
            cp_fraction_2d: 0.25,
            cp_lateral_m: (2.0, 6.0),
            cp_sigma_xy: 0.01,
            cp_sigma_z: 0.02,
            cp_measurement_noise: false,
            landmark_count: 300,
            detection_sigma_px: 0.0,
            feature_sigma_px: 0.0,
            feature_stride: 5,
            visibility: Visibility::default(),
            imu_noise_enabled: false,
            bias: Bias::zero(),
            gravity: default_gravity(),
            rig: default_rig(),
        }
    }

    /// Waypoint spline through a small campus-like loop.
    pub fn spline(seed: u64) -> Self {
        let waypoints = [(0.0, 0.0), (8.0, 2.0), (14.0, 9.0), (9.0, 16.0), (0.0, 14.0), (-4.0, 6.0), (1.0, 0.5)]
            .iter()
            .map(|&(x, y)| Vector3::new(x, y, 1.5))
            .collect();
        Self { path: PathKind::Spline { waypoints }, ..Self::figure8(seed) }
    }

    /// Vehicle-like steady travel.
    pub fn platform(seed: u64) -> Self {
        Self {
            duration_s: 30.0,
            path: PathKind::Platform { speed_mps: 2.0, sway_m: 0.5, height_m: 1.5 },
            ..Self::figure8(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "figure8" => Some(Self::figure8(seed)),
            "spline" => Some(Self::spline(seed)),
            "platform" => Some(Self::platform(seed)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::InvalidInput(format!("duration must be positive, got {}", self.duration_s)));
        }
        if !(self.camera_rate_hz > 0.0 && self.imu_rate_hz > 0.0) {
            return Err(Error::InvalidInput("rates must be positive".into()));
        }
        if self.feature_stride == 0 {
            return Err(Error::InvalidInput("feature stride must be at least 1".into()));
        }
        self.rig.validate()
    }
}

/// Ground truth scene.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub motion: PathMotion,
    /// Device poses at the camera rate.
    pub trajectory: Trajectory,
    /// IMU-origin world velocities at each trajectory pose.
    pub velocities: Vec<Vector3<f64>>,
    /// Surveyed control points as reported (noisy when configured).
    pub control_points: Vec<ControlPoint>,
    /// True positions of the control points, including height of 2D ones.
    pub cp_truth: Vec<Vector3<f64>>,
    pub landmarks: Vec<Vector3<f64>>,
}

impl SynthWorld {
    pub fn duration_s(&self) -> f64 {
        self.motion.duration_s
    }
}

/// World-frame velocity of the IMU origin.
pub fn imu_velocity(k: &Kinematics, imu_from_device: &RigidPose) -> Vector3<f64> {
    let lever = imu_from_device.inverse().translation;
    k.velocity + k.pose.rotation.rotate(&k.angular_velocity.cross(&lever))
}

fn frame_times(duration_s: f64, rate_hz: f64) -> Vec<i64> {
    let n = (duration_s * rate_hz + 1e-9).floor() as i64;
    (0..=n).map(|k| (k as f64 * 1e9 / rate_hz).round() as i64).collect()
}

fn scatter(motion: &PathMotion, rng: &mut ChaCha8Rng, lateral: (f64, f64), z: (f64, f64)) -> Vector3<f64> {
    let t = rng.random_range(0.0..motion.duration_s);
    let (p, v, _) = motion.translational(t);
    let left = Vector3::new(-v.y, v.x, 0.0).normalize();
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let d = rng.random_range(lateral.0..lateral.1);
    let along = rng.random_range(-1.0..1.0);
    let fwd = Vector3::new(v.x, v.y, 0.0).normalize();
    let mut q = p + left * (side * d) + fwd * along;
    q.z = rng.random_range(z.0..z.1);
    q
}

pub fn gen_world(config: &SynthConfig) -> Result<SynthWorld> {
    config.validate()?;
    let motion = PathMotion::new(config.path.clone(), config.duration_s)?;
    let mut poses = Vec::new();
    let mut velocities = Vec::new();
    for t_ns in frame_times(config.duration_s, config.camera_rate_hz) {
        let k = motion.kinematics(t_ns as f64 * 1e-9);
        poses.push(StampedPose { timestamp_ns: t_ns, pose: k.pose });
        velocities.push(imu_velocity(&k, &config.rig.imu_from_device));
    }

    let mut rng = rng_for(config.seed, STREAM_WORLD);
    let n_2d = (config.cp_fraction_2d * config.cp_count as f64).round() as usize;
    let cp_truth: Vec<_> = (0..config.cp_count).map(|_| scatter(&motion, &mut rng, config.cp_lateral_m, (0.0, 2.5))).collect();
    let landmarks = (0..config.landmark_count).map(|_| scatter(&motion, &mut rng, (3.0, 12.0), (-0.5, 5.0))).collect();

    let mut noise_rng = rng_for(config.seed, STREAM_CP_NOISE);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let control_points = cp_truth
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut m = *p;
            if config.cp_measurement_noise {
                m += Vector3::new(
                    config.cp_sigma_xy * unit.sample(&mut noise_rng),
                    config.cp_sigma_xy * unit.sample(&mut noise_rng),
                    config.cp_sigma_z * unit.sample(&mut noise_rng),
                );
            }
            let id = format!("cp{i:03}");
            // Spread horizontal-only points evenly through the list.
            let is_2d = n_2d > 0 && (i * n_2d) % config.cp_count < n_2d;
            if is_2d {
                ControlPoint::new_2d(id, m.x, m.y, config.cp_sigma_xy)
            } else {
                ControlPoint::new_3d(id, m, config.cp_sigma_xy, config.cp_sigma_z)
            }
        })
        .collect();

    Ok(SynthWorld { motion, trajectory: Trajectory::new(poses), velocities, control_points, cp_truth, landmarks })
}

/// Pixel of `point` in `camera` at `world_from_device`, if visible.
pub fn visible_pixel(
    camera: &RigCamera,
    world_from_device: &RigidPose,
    point: &Vector3<f64>,
    visibility: &Visibility,
) -> Option<Vector2<f64>> {
    let pc = camera.camera_from_device.apply(&world_from_device.inverse().apply(point));
    let range = pc.norm();
    if range < visibility.min_range_m || range > visibility.max_range_m {
        return None;
    }
    if pc.xy().norm().atan2(pc.z) > visibility.max_angle_deg.to_radians() {
        return None;
    }
    let px = camera.model.project(&pc).ok()?;
    camera.model.in_image(&px).then_some(px)
}

#[derive(Clone, Debug, Default)]
pub struct SynthDetections {
    pub cp_observations: BTreeMap<String, Vec<Observation>>,
    pub tracks: Vec<FeatureTrack>,
    /// Control points no camera ever saw.
    pub unobserved: Vec<String>,
}

impl SynthDetections {
    pub fn all_cp_observations(&self) -> impl Iterator<Item = (&String, &Observation)> {
        self.cp_observations.iter().flat_map(|(id, v)| v.iter().map(move |o| (id, o)))
    }
}

fn noisy(px: Vector2<f64>, sigma: f64, unit: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vector2<f64> {
    if sigma > 0.0 {
        px + Vector2::new(unit.sample(rng), unit.sample(rng)) * sigma
    } else {
        px
    }
}

fn assumed_covariance(sigma: f64) -> nalgebra::Matrix2<f64> {
    let s = if sigma > 0.0 { sigma } else { DEFAULT_DETECTION_SIGMA_PX };
    nalgebra::Matrix2::identity() * s * s
}

/// Control-point detections on every frame and feature observations on every
/// `feature_stride`-th frame, with Gaussian pixel noise. The stated detection
/// covariance equals the injected noise (or the default when noiseless).
pub fn gen_detections(world: &SynthWorld, config: &SynthConfig) -> SynthDetections {
    let mut rng = rng_for(config.seed, STREAM_DETECTIONS);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let cp_cov = assumed_covariance(config.detection_sigma_px);
    let feat_cov = assumed_covariance(config.feature_sigma_px);
    let mut cp_observations: BTreeMap<String, Vec<Observation>> =
        world.control_points.iter().map(|cp| (cp.id.clone(), Vec::new())).collect();
    let mut tracks: Vec<FeatureTrack> =
        (0..world.landmarks.len()).map(|i| FeatureTrack { id: i as u64, observations: Vec::new() }).collect();
    for (frame, sp) in world.trajectory.poses.iter().enumerate() {
        for cam in &config.rig.cameras {
            for (cp, truth) in world.control_points.iter().zip(&world.cp_truth) {
                if let Some(px) = visible_pixel(cam, &sp.pose, truth, &config.visibility) {
                    let mut o = Observation::new(sp.timestamp_ns, cam.id.clone(), noisy(px, config.detection_sigma_px, &unit, &mut rng));
                    o.covariance = cp_cov;
                    cp_observations.get_mut(&cp.id).expect("cp inserted").push(o);
                }
            }
            if frame % config.feature_stride != 0 {
                continue;
            }
            for (track, lm) in tracks.iter_mut().zip(&world.landmarks) {
                if let Some(px) = visible_pixel(cam, &sp.pose, lm, &config.visibility) {
                    let mut o = Observation::new(sp.timestamp_ns, cam.id.clone(), noisy(px, config.feature_sigma_px, &unit, &mut rng));
                    o.covariance = feat_cov;
                    track.observations.push(o);
                }
            }
        }
    }
    let unobserved = cp_observations.iter().filter(|(_, v)| v.is_empty()).map(|(k, _)| k.clone()).collect();
    tracks.retain(|t| t.observations.len() >= 2);
    SynthDetections { cp_observations, tracks, unobserved }
}

/// IMU samples at `rate_hz` over `[t0_ns, t1_ns]` for the IMU mounted at
/// `imu_from_device`. With `noise`, samples carry white noise at the stated
/// densities and the bias follows a random walk; see [`gen_imu_stream`] for
/// the true bias at every sample.
#[allow(clippy::too_many_arguments)]
pub fn gen_imu(
    motion: &dyn Motion,
    t0_ns: i64,
    t1_ns: i64,
    rate_hz: f64,
    imu_from_device: &RigidPose,
    noise: Option<&ImuNoise>,
    bias: &Bias,
    gravity: &Vector3<f64>,
    seed: u64,
) -> Vec<ImuSample> {
    gen_imu_stream(motion, t0_ns, t1_ns, rate_hz, imu_from_device, noise, bias, gravity, seed).samples
}

/// IMU samples with the bias in effect at each of them.
#[derive(Clone, Debug, Default)]
pub struct ImuStream {
    pub samples: Vec<ImuSample>,
    pub biases: Vec<Bias>,
}

impl ImuStream {
    /// True bias at the sample nearest to `t_ns`.
    pub fn bias_at(&self, t_ns: i64) -> Option<Bias> {
        let k = self.samples.partition_point(|s| s.timestamp_ns < t_ns);
        let pick = match (k.checked_sub(1), self.samples.get(k)) {
            (Some(a), Some(b)) if t_ns - self.samples[a].timestamp_ns < b.timestamp_ns - t_ns => a,
            (_, Some(_)) => k,
            (Some(a), None) => a,
            (None, None) => return None,
        };
        self.biases.get(pick).copied()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn gen_imu_stream(
    motion: &dyn Motion,
    t0_ns: i64,
    t1_ns: i64,
    rate_hz: f64,
    imu_from_device: &RigidPose,
    noise: Option<&ImuNoise>,
    bias: &Bias,
    gravity: &Vector3<f64>,
    seed: u64,
) -> ImuStream {
    let mut rng = rng_for(seed, STREAM_IMU);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let device_from_imu = imu_from_device.inverse();
    let r_di: Matrix3<f64> = device_from_imu.rotation.matrix();
    let lever = device_from_imu.translation;
    let period = 1e9 / rate_hz;
    let count = ((t1_ns - t0_ns) as f64 / period + 1e-6).floor() as i64;
    let mut out = Vec::with_capacity(count as usize + 1);
    let mut biases = Vec::with_capacity(count as usize + 1);
    let mut bias = *bias;
    let step = (1.0 / rate_hz).sqrt();
    for k in 0..=count {
        let t_ns = t0_ns + (k as f64 * period).round() as i64;
        let kin = motion.kinematics(t_ns as f64 * 1e-9);
        let r_wd = kin.pose.rotation.matrix();
        let (w, alpha) = (kin.angular_velocity, kin.angular_acceleration);
        let accel_world = kin.acceleration + r_wd * (alpha.cross(&lever) + w.cross(&w.cross(&lever)));
        let r_wi = r_wd * r_di;
        let mut gyro = r_di.transpose() * w + bias.gyro;
        let mut accel = r_wi.transpose() * (accel_world - gravity) + bias.accel;
        if let Some(n) = noise {
            let sg = n.gyro_noise_density * rate_hz.sqrt();
            let sa = n.accel_noise_density * rate_hz.sqrt();
            gyro += Vector3::from_fn(|_, _| unit.sample(&mut rng)) * sg;
            accel += Vector3::from_fn(|_, _| unit.sample(&mut rng)) * sa;
        }
        out.push(ImuSample { timestamp_ns: t_ns, gyro, accel });
        biases.push(bias);
        if let Some(n) = noise {
            bias.gyro += Vector3::from_fn(|_, _| unit.sample(&mut rng)) * (n.gyro_random_walk * step);
            bias.accel += Vector3::from_fn(|_, _| unit.sample(&mut rng)) * (n.accel_random_walk * step);
        }
    }
    ImuStream { samples: out, biases }
}

/// IMU stream covering the whole world trajectory, per the configuration.
pub fn gen_imu_for(world: &SynthWorld, config: &SynthConfig) -> Vec<ImuSample> {
    gen_imu_stream_for(world, config).samples
}

pub fn gen_imu_stream_for(world: &SynthWorld, config: &SynthConfig) -> ImuStream {
    let (t0, t1) = match (world.trajectory.poses.first(), world.trajectory.poses.last()) {
        (Some(a), Some(b)) => (a.timestamp_ns, b.timestamp_ns),
        _ => return ImuStream::default(),
    };
    gen_imu_stream(
        &world.motion,
        t0,
        t1,
        config.imu_rate_hz,
        &config.rig.imu_from_device,
        config.imu_noise_enabled.then_some(&config.rig.imu_noise),
        &config.bias,
        &config.gravity,
        config.seed,
    )
}

/// Known-error perturbation applied to a trajectory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PerturbModel {
    /// Independent position noise per pose, meters.
    pub sigma_pos: f64,
    /// Independent rotation noise per pose, radians.
    pub sigma_rot: f64,
    /// Positions scaled by `1 + rate·t` with `t` in seconds since the first pose.
    pub scale_drift_rate: f64,
    /// Seconds since the first pose during which poses are removed.
    pub dropout: Option<(f64, f64)>,
}

pub fn perturb_trajectory(traj: &Trajectory, model: &PerturbModel, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let t0 = traj.poses.first().map_or(0, |p| p.timestamp_ns);
    let mut out = Vec::with_capacity(traj.len());
    for sp in &traj.poses {
        let t = (sp.timestamp_ns - t0) as f64 * 1e-9;
        let dp = Vector3::from_fn(|_, _| unit.sample(&mut rng)) * model.sigma_pos;
        let dr = Vector3::from_fn(|_, _| unit.sample(&mut rng)) * model.sigma_rot;
        let dt_ns = sp.timestamp_ns - t0;
        if model.dropout.is_some_and(|(a, b)| dt_ns >= (a * 1e9).round() as i64 && dt_ns <= (b * 1e9).round() as i64) {
            continue;
        }
        let mut pose = sp.pose;
        pose.translation = pose.translation * (1.0 + model.scale_drift_rate * t) + dp;
        if model.sigma_rot > 0.0 {
            pose.rotation = pose.rotation.plus(&dr);
        }
        out.push(StampedPose { timestamp_ns: sp.timestamp_ns, pose });
    }
    Trajectory::new(out)
}
