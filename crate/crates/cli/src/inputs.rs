use std::collections::BTreeMap;
use std::path::Path;

use cpgt_core::alignment::ControlPoint;
use cpgt_core::geometry::RigCalibration;
use cpgt_core::inertial::ImuSample;
use cpgt_core::io;
use cpgt_core::trajectory::Trajectory;
use cpgt_core::triangulation::{FeatureTrack, Observation};
use cpgt_core::{Error, Result};
use nalgebra::Matrix2;

use crate::SequenceInputs;

/// Parsed files of one sequence.
pub struct Sequence {
    pub trajectory: Trajectory,
    pub observations: BTreeMap<String, Vec<Observation>>,
    pub cps: Vec<ControlPoint>,
    pub rig: RigCalibration,
}

fn name(path: &Path) -> String {
    path.display().to_string()
}

pub fn trajectory(path: &Path) -> Result<Trajectory> {
    io::parse_trajectory(&io::read_text(path)?, &name(path))
}

pub fn calibration(path: &Path) -> Result<RigCalibration> {
    io::parse_calibration(&io::read_text(path)?, &name(path))
}

pub fn imu(path: &Path) -> Result<Vec<ImuSample>> {
    io::parse_imu(&io::read_text(path)?, &name(path))
}

pub fn tracks(path: &Path, rig: &RigCalibration, pixel_sigma: f64) -> Result<Vec<FeatureTrack>> {
    let mut tracks = io::parse_tracks(&io::read_text(path)?, &name(path), Some(rig))?;
    for t in &mut tracks {
        set_sigma(&mut t.observations, pixel_sigma);
    }
    Ok(tracks)
}

fn set_sigma(obs: &mut [Observation], sigma: f64) {
    for o in obs {
        o.covariance = Matrix2::identity() * sigma * sigma;
    }
}

pub fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("pixel sigma must be positive, got {sigma}")))
    }
}

/// Reads all inputs before any output is produced.
pub fn sequence(paths: &SequenceInputs) -> Result<Sequence> {
    check_sigma(paths.pixel_sigma)?;
    let rig = calibration(&paths.calibration)?;
    let cps = io::parse_control_points(&io::read_text(&paths.control_points)?, &name(&paths.control_points))?;
    let mut observations = io::parse_detections(
        &io::read_text(&paths.detections)?,
        &name(&paths.detections),
        Some(&cps),
        Some(&rig),
    )?;
    for obs in observations.values_mut() {
        set_sigma(obs, paths.pixel_sigma);
    }
    let trajectory = trajectory(&paths.trajectory)?;
    Ok(Sequence { trajectory, observations, cps, rig })
}
