use std::collections::BTreeSet;

use super::{RigCamera, RigidPose};
use crate::inertial::ImuNoise;
use crate::{Error, Result};

/// Cameras and IMU mounted on one device.
#[derive(Clone, Debug, PartialEq)]
pub struct RigCalibration {
    pub cameras: Vec<RigCamera>,
    pub imu_from_device: RigidPose,
    pub imu_noise: ImuNoise,
}

impl RigCalibration {
    pub fn camera(&self, id: &str) -> Option<&RigCamera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for cam in &self.cameras {
            if !seen.insert(cam.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate camera id '{}'", cam.id)));
            }
            cam.model.validate()?;
        }
        self.imu_noise.validate()
    }
}
