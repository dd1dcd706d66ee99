//! Control-point triangulation from pixel detections with robust
//! initialization, least-squares refinement and covariance.

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{CameraKind, CameraModel, RigCalibration, RigidPose};
use crate::reprojection::FixedPoseReprojection;
use crate::solver::{self, CovarianceEstimator, Group, Manifold, Problem, RobustLoss, SolveOptions};
use crate::trajectory::{Trajectory, DEFAULT_ASSOC_TOL_NS};
use crate::{Error, Result};

pub const DEFAULT_DETECTION_SIGMA_PX: f64 = 1.0;
const MIN_RAY_ANGLE_DEG: f64 = 0.5;

/// A pixel detection of one point in one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Image identifier: the capture timestamp, matched against trajectory poses.
    pub timestamp_ns: i64,
    pub camera_id: String,
    pub pixel: Vector2<f64>,
    pub covariance: Matrix2<f64>,
}

impl Observation {
    pub fn new(timestamp_ns: i64, camera_id: impl Into<String>, pixel: Vector2<f64>) -> Self {
        Self {
            timestamp_ns,
            camera_id: camera_id.into(),
            pixel,
            covariance: Matrix2::identity() * DEFAULT_DETECTION_SIGMA_PX.powi(2),
        }
    }
}

/// Pixel observations of one scene landmark.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub id: u64,
    pub observations: Vec<Observation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriangulationConfig {
    pub threshold_px: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub assoc_tol_ns: i64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self { threshold_px: 4.0, max_iters: 500, seed: 42, assoc_tol_ns: DEFAULT_ASSOC_TOL_NS }
    }
}

/// Local-frame position of a control point with its uncertainty.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangulatedCp {
    pub cp_id: String,
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    /// Indices into the observation list the point was triangulated from.
    pub inliers: Vec<usize>,
    pub mean_reprojection_error: f64,
}

pub(crate) struct View {
    pub(crate) index: usize,
    pub(crate) camera_from_world: RigidPose,
    pub(crate) model: CameraModel,
}

impl View {
    fn center(&self) -> Vector3<f64> {
        self.camera_from_world.inverse().translation
    }

    fn reprojection_error(&self, p: &Vector3<f64>, pixel: &Vector2<f64>) -> Option<f64> {
        let pc = self.camera_from_world.apply(p);
        if self.model.kind != CameraKind::KannalaBrandt4 && pc.z <= 0.0 {
            return None;
        }
        self.model.project(&pc).ok().map(|px| (px - pixel).norm())
    }
}

/// Resolves observations to camera poses. Observations without a pose within
/// tolerance are skipped; unknown cameras are an error.
pub(crate) fn resolve(obs: &[Observation], poses: &Trajectory, rig: &RigCalibration, tol: i64) -> Result<Vec<View>> {
    let mut views = Vec::with_capacity(obs.len());
    for (index, o) in obs.iter().enumerate() {
        let cam = rig
            .camera(&o.camera_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown camera id '{}'", o.camera_id)))?;
        let Some(world_from_device) = poses.pose_at(o.timestamp_ns, tol) else { continue };
        views.push(View {
            index,
            camera_from_world: cam.camera_from_device.compose(&world_from_device.inverse()),
            model: cam.model.clone(),
        });
    }
    Ok(views)
}

fn subset<'a>(views: &'a [View], indices: &[usize]) -> Vec<&'a View> {
    indices.iter().filter_map(|i| views.iter().find(|v| v.index == *i)).collect()
}

/// Two-ray midpoint; `None` if the rays are too close to parallel.
fn midpoint(a: &View, b: &View, obs: &[Observation]) -> Result<Option<Vector3<f64>>> {
    let ray = |v: &View| -> Result<Vector3<f64>> {
        let d = v.model.unproject(&obs[v.index].pixel)?;
        Ok(v.camera_from_world.rotation.inverse().rotate(&d).normalize())
    };
    let (da, db) = (ray(a)?, ray(b)?);
    if da.dot(&db).clamp(-1.0, 1.0).acos() < MIN_RAY_ANGLE_DEG.to_radians() {
        return Ok(None);
    }
    let (ca, cb) = (a.center(), b.center());
    let w = cb - ca;
    let m = Matrix2::new(1.0, -da.dot(&db), da.dot(&db), -1.0);
    let Some(t) = m.try_inverse().map(|inv| inv * Vector2::new(w.dot(&da), w.dot(&db))) else {
        return Ok(None);
    };
    Ok(Some(((ca + da * t.x) + (cb + db * t.y)) * 0.5))
}

fn point_problem(point: &Vector3<f64>, views: &[&View], obs: &[Observation]) -> Result<(Problem, usize)> {
    let mut problem = Problem::new();
    let id = problem.add_parameter(point.as_slice().to_vec(), Manifold::Euclidean(3));
    for v in views {
        let o = &obs[v.index];
        let f = FixedPoseReprojection {
            camera_from_world: v.camera_from_world,
            model: v.model.clone(),
            measured: o.pixel,
        };
        let cov = DMatrix::from_column_slice(2, 2, o.covariance.as_slice());
        let r = problem.add_residual(Box::new(f), vec![id], Group::MarkerReprojection, cov, RobustLoss::None)?;
        problem.set_anchor(r, true);
    }
    Ok((problem, id))
}

fn least_squares(point: &Vector3<f64>, views: &[&View], obs: &[Observation], max_iters: usize) -> Result<Vector3<f64>> {
    let (mut problem, id) = point_problem(point, views, obs)?;
    let options = SolveOptions { max_iters, ..SolveOptions::default() };
    solver::solve(&mut problem, &options)?;
    let p = problem.parameter(id);
    Ok(Vector3::new(p[0], p[1], p[2]))
}

struct Scored {
    inliers: Vec<usize>,
    cost: f64,
}

fn score(p: &Vector3<f64>, views: &[View], obs: &[Observation], threshold: f64) -> Scored {
    let mut inliers = Vec::new();
    let mut cost = 0.0;
    for v in views {
        match v.reprojection_error(p, &obs[v.index].pixel) {
            Some(e) if e <= threshold => {
                inliers.push(v.index);
                cost += e * e;
            }
            _ => cost += threshold * threshold,
        }
    }
    Scored { inliers, cost }
}

fn better(a: &Scored, b: &Scored) -> bool {
    a.inliers.len() > b.inliers.len() || (a.inliers.len() == b.inliers.len() && a.cost < b.cost)
}

/// LO-RANSAC over two-view midpoint hypotheses. Returns the point and the
/// indices of inlier observations.
pub fn triangulate_ransac(
    obs: &[Observation],
    poses: &Trajectory,
    rig: &RigCalibration,
    config: &TriangulationConfig,
) -> Result<(Vector3<f64>, Vec<usize>)> {
    let views = resolve(obs, poses, rig, config.assoc_tol_ns)?;
    let n = views.len();
    if n < 2 {
        return Err(Error::InsufficientObservations { needed: 2, got: n });
    }
    let total_pairs = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = if total_pairs <= config.max_iters {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        (0..config.max_iters)
            .map(|_| {
                let i = rng.random_range(0..n);
                let j = (i + rng.random_range(1..n)) % n;
                (i.min(j), i.max(j))
            })
            .collect()
    };

    let mut any_geometry = false;
    let mut best: Option<(Vector3<f64>, Scored)> = None;
    for (i, j) in pairs {
        let Some(p) = midpoint(&views[i], &views[j], obs)? else { continue };
        any_geometry = true;
        let s = score(&p, &views, obs, config.threshold_px);
        if s.inliers.len() < 2 || best.as_ref().is_some_and(|(_, b)| !better(&s, b)) {
            continue;
        }
        let mut candidate = (p, s);
        if let Ok(q) = least_squares(&p, &subset(&views, &candidate.1.inliers), obs, 10) {
            let sq = score(&q, &views, obs, config.threshold_px);
            if !better(&candidate.1, &sq) {
                candidate = (q, sq);
            }
        }
        best = Some(candidate);
    }
    if !any_geometry {
        return Err(Error::DegenerateGeometry(format!(
            "all {n} views see the point along near-parallel rays"
        )));
    }
    let (p, s) = best.ok_or(Error::NoConsensus)?;
    Ok((p, s.inliers))
}

/// Minimizes the inlier reprojection error starting at `init`.
pub fn refine_triangulation(
    cp_id: &str,
    init: &Vector3<f64>,
    inliers: &[usize],
    obs: &[Observation],
    poses: &Trajectory,
    rig: &RigCalibration,
    config: &TriangulationConfig,
) -> Result<TriangulatedCp> {
    let views = resolve(obs, poses, rig, config.assoc_tol_ns)?;
    let used = subset(&views, inliers);
    if used.len() < 2 {
        return Err(Error::InsufficientObservations { needed: 2, got: used.len() });
    }
    let position = least_squares(init, &used, obs, SolveOptions::default().max_iters)?;
    let mut total = 0.0;
    for v in &used {
        let pc = v.camera_from_world.apply(&position);
        if v.model.kind != CameraKind::KannalaBrandt4 && pc.z <= 0.0 {
            return Err(Error::BehindCamera { depth: pc.z });
        }
        total += (v.model.project(&pc)? - obs[v.index].pixel).norm();
    }
    let mut cp = TriangulatedCp {
        cp_id: cp_id.to_string(),
        position,
        covariance: Matrix3::zeros(),
        inliers: used.iter().map(|v| v.index).collect(),
        mean_reprojection_error: total / used.len() as f64,
    };
    cp.covariance = triangulation_covariance(&cp, obs, poses, rig, config)?;
    Ok(cp)
}

/// Inverse Gauss-Newton Hessian of the reprojection error at `cp.position`.
pub fn triangulation_covariance(
    cp: &TriangulatedCp,
    obs: &[Observation],
    poses: &Trajectory,
    rig: &RigCalibration,
    config: &TriangulationConfig,
) -> Result<Matrix3<f64>> {
    let views = resolve(obs, poses, rig, config.assoc_tol_ns)?;
    let used = subset(&views, &cp.inliers);
    if used.len() < 2 {
        return Err(Error::InsufficientObservations { needed: 2, got: used.len() });
    }
    let (problem, id) = point_problem(&cp.position, &used, obs)?;
    let cov = match CovarianceEstimator::new(&problem).and_then(|e| e.block(id)) {
        Ok(c) => c,
        Err(Error::RankDeficient { .. }) => {
            return Err(Error::DegenerateGeometry(format!("singular triangulation Hessian for '{}'", cp.cp_id)))
        }
        Err(e) => return Err(e),
    };
    Ok(Matrix3::from_iterator(cov.iter().copied()))
}

/// RANSAC followed by refinement and covariance.
pub fn triangulate_cp(
    cp_id: &str,
    obs: &[Observation],
    poses: &Trajectory,
    rig: &RigCalibration,
    config: &TriangulationConfig,
) -> Result<TriangulatedCp> {
    let (init, inliers) = triangulate_ransac(obs, poses, rig, config)?;
    refine_triangulation(cp_id, &init, &inliers, obs, poses, rig, config)
}
