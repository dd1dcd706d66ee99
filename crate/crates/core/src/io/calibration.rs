use serde::{Deserialize, Serialize};

use crate::geometry::{CameraKind, CameraModel, RigCalibration, RigCamera, RigidPose};
use crate::inertial::ImuNoise;
use crate::{Error, Result};

use super::rotation;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseToml {
    /// Quaternion `[w, x, y, z]`.
    rotation: [f64; 4],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraToml {
    id: String,
    model: String,
    width: u32,
    height: u32,
    /// `[fx, fy, cx, cy]`.
    intrinsics: [f64; 4],
    #[serde(default)]
    distortion: Vec<f64>,
    camera_from_device: PoseToml,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImuToml {
    imu_from_device: PoseToml,
    gyro_noise_density: f64,
    accel_noise_density: f64,
    gyro_random_walk: f64,
    accel_random_walk: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigToml {
    imu: ImuToml,
    cameras: Vec<CameraToml>,
}

fn pose_to_toml(p: &RigidPose) -> PoseToml {
    PoseToml { rotation: p.rotation.wxyz(), translation: p.translation.into() }
}

fn pose_from_toml(p: &PoseToml, file: &str, line: usize) -> Result<RigidPose> {
    let [w, x, y, z] = p.rotation;
    Ok(RigidPose::new(rotation(file, line, w, x, y, z)?, p.translation.into()))
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn parse_calibration(text: &str, file: &str) -> Result<RigCalibration> {
    let raw: RigToml = toml::from_str(text).map_err(|e| Error::Parse {
        file: file.to_string(),
        line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
        message: e.message().to_string(),
    })?;
    let err = |message: String| Error::Parse { file: file.to_string(), line: 0, message };
    let mut cameras = Vec::with_capacity(raw.cameras.len());
    for c in &raw.cameras {
        let kind = CameraKind::from_name(&c.model).ok_or_else(|| err(format!("camera '{}': unknown model '{}'", c.id, c.model)))?;
        if c.distortion.len() != kind.num_distortion() {
            return Err(err(format!(
                "camera '{}': model {} takes {} distortion coefficients, found {}",
                c.id,
                kind.name(),
                kind.num_distortion(),
                c.distortion.len()
            )));
        }
        let mut distortion = [0.0; 4];
        distortion[..c.distortion.len()].copy_from_slice(&c.distortion);
        let [fx, fy, cx, cy] = c.intrinsics;
        let model = CameraModel { kind, fx, fy, cx, cy, distortion, width: c.width, height: c.height };
        cameras.push(RigCamera { id: c.id.clone(), model, camera_from_device: pose_from_toml(&c.camera_from_device, file, 0)? });
    }
    let imu = &raw.imu;
    let rig = RigCalibration {
        cameras,
        imu_from_device: pose_from_toml(&imu.imu_from_device, file, 0)?,
        imu_noise: ImuNoise {
            gyro_noise_density: imu.gyro_noise_density,
            accel_noise_density: imu.accel_noise_density,
            gyro_random_walk: imu.gyro_random_walk,
            accel_random_walk: imu.accel_random_walk,
        },
    };
    rig.validate().map_err(|e| err(e.to_string()))?;
    Ok(rig)
}

pub fn write_calibration(rig: &RigCalibration) -> String {
    let n = &rig.imu_noise;
    let raw = RigToml {
        imu: ImuToml {
            imu_from_device: pose_to_toml(&rig.imu_from_device),
            gyro_noise_density: n.gyro_noise_density,
            accel_noise_density: n.accel_noise_density,
            gyro_random_walk: n.gyro_random_walk,
            accel_random_walk: n.accel_random_walk,
        },
        cameras: rig
            .cameras
            .iter()
            .map(|c| {
                let m = &c.model;
                CameraToml {
                    id: c.id.clone(),
                    model: m.kind.name().to_string(),
                    width: m.width,
                    height: m.height,
                    intrinsics: [m.fx, m.fy, m.cx, m.cy],
                    distortion: m.distortion[..m.kind.num_distortion()].to_vec(),
                    camera_from_device: pose_to_toml(&c.camera_from_device),
                }
            })
            .collect(),
    };
    toml::to_string(&raw).expect("calibration serializes")
}
