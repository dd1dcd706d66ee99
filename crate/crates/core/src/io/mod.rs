//! Text file formats: trajectories, control points, detections, IMU samples,
//! feature tracks, rig calibration and pose covariance sidecars.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use csv::{ReaderBuilder, StringRecord, Trim};
use log::warn;
use nalgebra::{Matrix2, Matrix6, Vector2, Vector3};

use crate::alignment::{ControlPoint, CpDim};
use crate::geometry::{RigCalibration, RigidPose, Rotation};
use crate::inertial::ImuSample;
use crate::trajectory::{StampedPose, Trajectory};
use crate::triangulation::{FeatureTrack, Observation, DEFAULT_DETECTION_SIGMA_PX};
use crate::{Error, Result};

mod calibration;

pub use calibration::{parse_calibration, write_calibration};

/// Largest deviation from unit norm accepted without renormalization.
pub const QUATERNION_NORM_TOL: f64 = 1e-6;

pub const CONTROL_POINT_HEADER: &str = "id,dim,x,y,z,sigma_xy,sigma_z";
pub const DETECTION_HEADER: &str = "timestamp_ns,camera_id,cp_id,u,v";
pub const IMU_HEADER: &str = "timestamp_ns,gx,gy,gz,ax,ay,az";
pub const TRACK_HEADER: &str = "track_id,timestamp_ns,camera_id,u,v";

fn parse_error(file: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { file: file.to_string(), line, message: message.into() }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn num<T: std::str::FromStr>(file: &str, line: usize, name: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| parse_error(file, line, format!("invalid {name} '{s}'")))
}

fn finite(file: &str, line: usize, name: &str, s: &str) -> Result<f64> {
    let v: f64 = num(file, line, name, s)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(parse_error(file, line, format!("non-finite {name}")))
    }
}

/// Builds a rotation from file coefficients, renormalizing (with a warning)
/// when the norm is off by more than the tolerance.
fn rotation(file: &str, line: usize, w: f64, x: f64, y: f64, z: f64) -> Result<Rotation> {
    let norm = (w * w + x * x + y * y + z * z).sqrt();
    if norm < 1e-9 {
        return Err(parse_error(file, line, "zero quaternion"));
    }
    if (norm - 1.0).abs() > QUATERNION_NORM_TOL {
        warn!("{file}:{line}: quaternion norm {norm} renormalized");
        return Ok(Rotation::from_wxyz(w, x, y, z));
    }
    Ok(Rotation::from_wxyz_unchecked(w, x, y, z))
}

/// `timestamp_ns tx ty tz qx qy qz qw` per line; `#` starts a comment.
pub fn parse_trajectory(text: &str, file: &str) -> Result<Trajectory> {
    let mut poses: Vec<StampedPose> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let f: Vec<&str> = content.split_whitespace().collect();
        if f.len() != 8 {
            return Err(parse_error(file, line, format!("expected 8 fields, found {}", f.len())));
        }
        let t: i64 = num(file, line, "timestamp", f[0])?;
        let v: Vec<f64> = f[1..].iter().map(|s| finite(file, line, "value", s)).collect::<Result<_>>()?;
        if let Some(prev) = poses.last() {
            if t <= prev.timestamp_ns {
                return Err(parse_error(file, line, format!("timestamp {t} not after {}", prev.timestamp_ns)));
            }
        }
        let rot = rotation(file, line, v[6], v[3], v[4], v[5])?;
        poses.push(StampedPose { timestamp_ns: t, pose: RigidPose::new(rot, Vector3::new(v[0], v[1], v[2])) });
    }
    Ok(Trajectory::new(poses))
}

pub fn write_trajectory(traj: &Trajectory) -> String {
    let mut out = String::from("# timestamp_ns tx ty tz qx qy qz qw\n");
    for p in &traj.poses {
        let t = p.pose.translation;
        let [w, x, y, z] = p.pose.rotation.wxyz();
        let _ = writeln!(out, "{} {} {} {} {} {} {} {}", p.timestamp_ns, t.x, t.y, t.z, x, y, z, w);
    }
    out
}

/// Reads comma-separated records after checking the header, yielding each
/// record with its 1-based line number.
fn csv_records(text: &str, file: &str, header: &str) -> Result<Vec<(usize, StringRecord)>> {
    let mut rdr = ReaderBuilder::new().has_headers(true).trim(Trim::All).comment(Some(b'#')).from_reader(text.as_bytes());
    let found = rdr.headers().map_err(|e| parse_error(file, 1, e.to_string()))?.clone();
    let expected: Vec<&str> = header.split(',').collect();
    if found.iter().collect::<Vec<_>>() != expected {
        return Err(parse_error(file, 1, format!("expected header '{header}'")));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_error(file, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        out.push((line, rec));
    }
    Ok(out)
}

pub fn parse_control_points(text: &str, file: &str) -> Result<Vec<ControlPoint>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, r) in csv_records(text, file, CONTROL_POINT_HEADER)? {
        let id = r[0].to_string();
        if id.is_empty() {
            return Err(parse_error(file, line, "empty control point id"));
        }
        if !seen.insert(id.clone()) {
            return Err(parse_error(file, line, format!("duplicate control point id '{id}'")));
        }
        let x = finite(file, line, "x", &r[2])?;
        let y = finite(file, line, "y", &r[3])?;
        let sxy = finite(file, line, "sigma_xy", &r[5])?;
        if sxy <= 0.0 {
            return Err(parse_error(file, line, "sigma_xy must be positive"));
        }
        let cp = match &r[1] {
            "2" => {
                if !r[4].is_empty() || !r[6].is_empty() {
                    return Err(parse_error(file, line, "z and sigma_z must be empty for a 2D control point"));
                }
                ControlPoint::new_2d(id, x, y, sxy)
            }
            "3" => {
                let z = finite(file, line, "z", &r[4])?;
                let sz = finite(file, line, "sigma_z", &r[6])?;
                if sz <= 0.0 {
                    return Err(parse_error(file, line, "sigma_z must be positive"));
                }
                ControlPoint::new_3d(id, Vector3::new(x, y, z), sxy, sz)
            }
            d => return Err(parse_error(file, line, format!("dim must be 2 or 3, found '{d}'"))),
        };
        out.push(cp);
    }
    Ok(out)
}

pub fn write_control_points(cps: &[ControlPoint]) -> String {
    let mut out = format!("{CONTROL_POINT_HEADER}\n");
    for cp in cps {
        let p = cp.position;
        let sxy = cp.covariance[(0, 0)].sqrt();
        let _ = match cp.dim {
            CpDim::Two => writeln!(out, "{},2,{},{},,{},", cp.id, p.x, p.y, sxy),
            CpDim::Three => writeln!(out, "{},3,{},{},{},{},{}", cp.id, p.x, p.y, p.z, sxy, cp.covariance[(2, 2)].sqrt()),
        };
    }
    out
}

fn pixel_observation(file: &str, line: usize, t: &str, cam: &str, u: &str, v: &str) -> Result<Observation> {
    let t = num(file, line, "timestamp", t)?;
    let px = Vector2::new(finite(file, line, "u", u)?, finite(file, line, "v", v)?);
    Ok(Observation { timestamp_ns: t, camera_id: cam.to_string(), pixel: px, covariance: Matrix2::identity() * DEFAULT_DETECTION_SIGMA_PX.powi(2) })
}

fn check_camera(file: &str, line: usize, cam: &str, rig: Option<&RigCalibration>) -> Result<()> {
    match rig {
        Some(rig) if rig.camera(cam).is_none() => Err(parse_error(file, line, format!("unknown camera id '{cam}'"))),
        _ => Ok(()),
    }
}

/// Marker detections grouped by control point id, in file order. When given,
/// `cps` and `rig` are used to reject unknown ids.
pub fn parse_detections(
    text: &str,
    file: &str,
    cps: Option<&[ControlPoint]>,
    rig: Option<&RigCalibration>,
) -> Result<BTreeMap<String, Vec<Observation>>> {
    let known: Option<BTreeSet<&str>> = cps.map(|c| c.iter().map(|c| c.id.as_str()).collect());
    let mut out: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
    for (line, r) in csv_records(text, file, DETECTION_HEADER)? {
        check_camera(file, line, &r[1], rig)?;
        if let Some(k) = &known {
            if !k.contains(&r[2]) {
                return Err(parse_error(file, line, format!("unknown control point id '{}'", &r[2])));
            }
        }
        let obs = pixel_observation(file, line, &r[0], &r[1], &r[3], &r[4])?;
        out.entry(r[2].to_string()).or_default().push(obs);
    }
    Ok(out)
}

/// Writes detections sorted by timestamp, camera and control point.
pub fn write_detections(det: &BTreeMap<String, Vec<Observation>>) -> String {
    let mut rows: Vec<(&Observation, &str)> = det.iter().flat_map(|(id, v)| v.iter().map(move |o| (o, id.as_str()))).collect();
    rows.sort_by(|a, b| (a.0.timestamp_ns, &a.0.camera_id, a.1).cmp(&(b.0.timestamp_ns, &b.0.camera_id, b.1)));
    let mut out = format!("{DETECTION_HEADER}\n");
    for (o, id) in rows {
        let _ = writeln!(out, "{},{},{},{},{}", o.timestamp_ns, o.camera_id, id, o.pixel.x, o.pixel.y);
    }
    out
}

pub fn parse_imu(text: &str, file: &str) -> Result<Vec<ImuSample>> {
    let mut out: Vec<ImuSample> = Vec::new();
    for (line, r) in csv_records(text, file, IMU_HEADER)? {
        let t: i64 = num(file, line, "timestamp", &r[0])?;
        if let Some(prev) = out.last() {
            if t <= prev.timestamp_ns {
                return Err(parse_error(file, line, format!("timestamp {t} not after {}", prev.timestamp_ns)));
            }
        }
        let v: Vec<f64> = (1..7).map(|i| finite(file, line, "value", &r[i])).collect::<Result<_>>()?;
        out.push(ImuSample { timestamp_ns: t, gyro: Vector3::new(v[0], v[1], v[2]), accel: Vector3::new(v[3], v[4], v[5]) });
    }
    Ok(out)
}

pub fn write_imu(samples: &[ImuSample]) -> String {
    let mut out = format!("{IMU_HEADER}\n");
    for s in samples {
        let (g, a) = (s.gyro, s.accel);
        let _ = writeln!(out, "{},{},{},{},{},{},{}", s.timestamp_ns, g.x, g.y, g.z, a.x, a.y, a.z);
    }
    out
}

/// Feature tracks ordered by id; observations keep file order and must not
/// go back in time within a track.
pub fn parse_tracks(text: &str, file: &str, rig: Option<&RigCalibration>) -> Result<Vec<FeatureTrack>> {
    let mut tracks: BTreeMap<u64, Vec<Observation>> = BTreeMap::new();
    for (line, r) in csv_records(text, file, TRACK_HEADER)? {
        let id: u64 = num(file, line, "track id", &r[0])?;
        check_camera(file, line, &r[2], rig)?;
        let obs = pixel_observation(file, line, &r[1], &r[2], &r[3], &r[4])?;
        let list = tracks.entry(id).or_default();
        if list.last().is_some_and(|p| obs.timestamp_ns < p.timestamp_ns) {
            return Err(parse_error(file, line, format!("track {id} goes back in time")));
        }
        list.push(obs);
    }
    Ok(tracks.into_iter().map(|(id, observations)| FeatureTrack { id, observations }).collect())
}

pub fn write_tracks(tracks: &[FeatureTrack]) -> String {
    let mut out = format!("{TRACK_HEADER}\n");
    for t in tracks {
        for o in &t.observations {
            let _ = writeln!(out, "{},{},{},{},{}", t.id, o.timestamp_ns, o.camera_id, o.pixel.x, o.pixel.y);
        }
    }
    out
}

pub fn covariance_header() -> String {
    let mut h = String::from("timestamp_ns");
    for i in 0..6 {
        for j in i..6 {
            let _ = write!(h, ",c{i}{j}");
        }
    }
    h
}

/// Keyframe timestamp and the upper triangle of each 6×6 pose covariance.
pub fn parse_covariance_sidecar(text: &str, file: &str) -> Result<Vec<(i64, Matrix6<f64>)>> {
    let mut out = Vec::new();
    for (line, r) in csv_records(text, file, &covariance_header())? {
        let t = num(file, line, "timestamp", &r[0])?;
        let mut c = Matrix6::zeros();
        let mut k = 1;
        for i in 0..6 {
            for j in i..6 {
                let v = finite(file, line, "covariance entry", &r[k])?;
                c[(i, j)] = v;
                c[(j, i)] = v;
                k += 1;
            }
        }
        out.push((t, c));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
