//! World-from-local similarity estimation from control points.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, SVD};

use crate::geometry::{hat, RigCalibration, Rotation, Similarity};
use crate::reprojection::FixedPoseReprojection;
use crate::solver::manifold::{decode_similarity, decode_vec3, encode_similarity};
use crate::solver::{self, Evaluation, Group, Manifold, Problem, Residual, RobustLoss, SolveOptions, SolveReport};
use crate::trajectory::{Trajectory, DEFAULT_ASSOC_TOL_NS};
use crate::triangulation::{resolve, Observation, TriangulatedCp};
use crate::{Error, Result};

/// Prior standard deviation pinning the unobservable directions of a
/// horizontal-only fit.
const GAUGE_PRIOR_SIGMA: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CpDim {
    /// Horizontal position only.
    Two,
    Three,
}

impl CpDim {
    pub fn count(&self) -> usize {
        match self {
            CpDim::Two => 2,
            CpDim::Three => 3,
        }
    }
}

/// A surveyed world point. For 2D points `position.z` is unused and the
/// vertical row and column of `covariance` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPoint {
    pub id: String,
    pub position: Vector3<f64>,
    pub dim: CpDim,
    pub covariance: Matrix3<f64>,
}

impl ControlPoint {
    pub fn new_3d(id: impl Into<String>, position: Vector3<f64>, sigma_xy: f64, sigma_z: f64) -> Self {
        Self {
            id: id.into(),
            position,
            dim: CpDim::Three,
            covariance: Matrix3::from_diagonal(&Vector3::new(sigma_xy * sigma_xy, sigma_xy * sigma_xy, sigma_z * sigma_z)),
        }
    }

    pub fn new_2d(id: impl Into<String>, x: f64, y: f64, sigma_xy: f64) -> Self {
        Self {
            id: id.into(),
            position: Vector3::new(x, y, 0.0),
            dim: CpDim::Two,
            covariance: Matrix3::from_diagonal(&Vector3::new(sigma_xy * sigma_xy, sigma_xy * sigma_xy, 0.0)),
        }
    }

    /// Measurement covariance restricted to the constrained components.
    pub fn measurement_covariance(&self) -> DMatrix<f64> {
        let n = self.dim.count();
        DMatrix::from_fn(n, n, |i, j| self.covariance[(i, j)])
    }

    pub fn validate(&self) -> Result<()> {
        let cov = self.measurement_covariance();
        let ok = cov.clone().cholesky().is_some() && self.position.iter().take(self.dim.count()).all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("control point '{}' has invalid position or covariance", self.id)))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    TwoD,
    ThreeD,
}

impl EvalMode {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::TwoD => "2d",
            EvalMode::ThreeD => "3d",
        }
    }
}

/// Closed-form least-squares similarity (or rigid transform when
/// `with_scale` is false) mapping `src` onto `dst`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<Similarity> {
    let n = src.len();
    if n != dst.len() {
        return Err(Error::InvalidInput("point sets differ in length".into()));
    }
    if n < 3 {
        return Err(Error::DegenerateConfiguration(format!("{n} point pairs, need at least 3")));
    }
    let mu_s = src.iter().sum::<Vector3<f64>>() / n as f64;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cross = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    let mut var_s = 0.0;
    for (a, b) in src.iter().zip(dst) {
        let (xa, xb) = (a - mu_s, b - mu_d);
        cross += xb * xa.transpose();
        spread += xa * xa.transpose();
        var_s += xa.norm_squared();
    }
    cross /= n as f64;
    var_s /= n as f64;
    let sv = spread.singular_values();
    let (hi, mid) = (sv.max(), {
        let mut v: Vec<f64> = sv.iter().copied().collect();
        v.sort_by(|a, b| b.total_cmp(a));
        v[1]
    });
    if !(mid > 1e-10 * hi) {
        return Err(Error::DegenerateConfiguration("control points are collinear".into()));
    }
    let svd = SVD::new(cross, true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let scale = if with_scale { (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_s } else { 1.0 };
    let rotation = Rotation::from_matrix(&r);
    Ok(Similarity::new(scale, rotation, mu_d - rotation.rotate(&mu_s) * scale))
}

/// Similarity from (local, world) pairs of 3D control points.
pub fn umeyama_init(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Result<Similarity> {
    let (src, dst): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
    umeyama(&src, &dst, true)
}

/// Yaw, horizontal translation and scale from horizontal correspondences,
/// assuming the local frame is gravity-aligned. Vertical offset comes from the
/// 3D pairs when any exist.
pub fn horizontal_init(pairs: &[(Vector3<f64>, Vector3<f64>, CpDim)]) -> Result<Similarity> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::DegenerateConfiguration(format!("{n} horizontal pairs, need at least 2")));
    }
    let mu_s = pairs.iter().map(|p| p.0.xy()).sum::<nalgebra::Vector2<f64>>() / n as f64;
    let mu_d = pairs.iter().map(|p| p.1.xy()).sum::<nalgebra::Vector2<f64>>() / n as f64;
    let (mut dot, mut crs, mut var) = (0.0, 0.0, 0.0);
    for (a, b, _) in pairs {
        let (x, y) = (a.xy() - mu_s, b.xy() - mu_d);
        dot += x.dot(&y);
        crs += x.x * y.y - x.y * y.x;
        var += x.norm_squared();
    }
    if var <= 1e-20 || dot.hypot(crs) <= 1e-20 {
        return Err(Error::DegenerateConfiguration("horizontal control points coincide".into()));
    }
    let yaw = crs.atan2(dot);
    let scale = dot.hypot(crs) / var;
    let rotation = Rotation::exp(&Vector3::new(0.0, 0.0, yaw));
    let mut translation = Vector3::zeros();
    let txy = mu_d - (rotation.rotate(&Vector3::new(mu_s.x, mu_s.y, 0.0)) * scale).xy();
    translation.x = txy.x;
    translation.y = txy.y;
    let vertical: Vec<f64> = pairs.iter().filter(|p| p.2 == CpDim::Three).map(|p| p.1.z - scale * p.0.z).collect();
    if !vertical.is_empty() {
        translation.z = vertical.iter().sum::<f64>() / vertical.len() as f64;
    }
    Ok(Similarity::new(scale, rotation, translation))
}

/// `s²·R·Σ·Rᵀ`.
pub fn propagate_covariance(cov: &Matrix3<f64>, t: &Similarity) -> Matrix3<f64> {
    let r = t.rotation.matrix();
    r * cov * r.transpose() * (t.scale * t.scale)
}

/// Square root of the spectral norm of a covariance.
pub fn uncertainty(cov: &DMatrix<f64>) -> f64 {
    cov.clone().symmetric_eigenvalues().amax().sqrt()
}

/// `(T·p − P_W)` over the constrained components. Blocks: `[T, p]`.
struct WorldResidual {
    measured: Vector3<f64>,
    dims: usize,
}

impl Residual for WorldResidual {
    fn dim(&self) -> usize {
        self.dims
    }

    fn evaluate(&self, params: &[&[f64]], want_jacobians: bool) -> Evaluation {
        let t = decode_similarity(params[0]);
        let p = decode_vec3(params[1]);
        let r = t.apply(&p) - self.measured;
        let n = self.dims;
        let jacobians = want_jacobians.then(|| {
            let sr = t.rotation.matrix() * t.scale;
            let d_rot = -sr * hat(&p);
            let srp = sr * p;
            let jt = DMatrix::from_fn(n, 7, |i, j| match j {
                0..=2 => d_rot[(i, j)],
                3..=5 => f64::from(i == j - 3),
                _ => srp[i],
            });
            vec![jt, DMatrix::from_fn(n, 3, |i, j| sr[(i, j)])]
        });
        Evaluation { residual: DVector::from_column_slice(&r.as_slice()[..n]), jacobians }
    }
}

/// Keeps the local vertical aligned with the world vertical and, optionally,
/// the vertical offset at its initial value. Block: `[T]`.
struct VerticalGauge {
    z0: Option<f64>,
}

impl Residual for VerticalGauge {
    fn dim(&self) -> usize {
        2 + usize::from(self.z0.is_some())
    }

    fn evaluate(&self, params: &[&[f64]], want_jacobians: bool) -> Evaluation {
        let t = decode_similarity(params[0]);
        let up = t.rotation.rotate(&Vector3::z());
        let mut r = vec![up.x, up.y];
        if let Some(z0) = self.z0 {
            r.push(t.translation.z - z0);
        }
        let jacobians = want_jacobians.then(|| {
            let d = -t.rotation.matrix() * hat(&Vector3::z());
            let mut j = DMatrix::zeros(self.dim(), 7);
            for row in 0..2 {
                for c in 0..3 {
                    j[(row, c)] = d[(row, c)];
                }
            }
            if self.z0.is_some() {
                j[(2, 5)] = 1.0;
            }
            vec![j]
        });
        Evaluation { residual: DVector::from_vec(r), jacobians }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentConfig {
    /// Huber threshold on whitened reprojection residuals.
    pub huber: f64,
    pub assoc_tol_ns: i64,
    pub solve: SolveOptions,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { huber: 3.0, assoc_tol_ns: DEFAULT_ASSOC_TOL_NS, solve: SolveOptions::default() }
    }
}

/// Per-CP outcome of a sparse alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct CpAlignment {
    pub id: String,
    pub dim: CpDim,
    /// Horizontal error of the original triangulation, ∞ when untriangulated.
    pub error_2d: f64,
    /// Full error, only for 3D control points.
    pub error_3d: Option<f64>,
    /// Triangulation covariance expressed in the world frame.
    pub metric_covariance: Option<Matrix3<f64>>,
    pub used: bool,
}

#[derive(Clone, Debug)]
pub struct SparseAlignment {
    pub transform: Similarity,
    pub proxies: BTreeMap<String, Vector3<f64>>,
    pub per_cp: Vec<CpAlignment>,
    /// Initialization used the yaw-only horizontal fit.
    pub horizontal_fallback: bool,
    pub report: SolveReport,
}

fn usable<'a>(
    triangulations: &'a BTreeMap<String, TriangulatedCp>,
    cps: &'a [ControlPoint],
) -> Vec<(&'a ControlPoint, &'a TriangulatedCp)> {
    cps.iter()
        .filter_map(|cp| triangulations.get(&cp.id).map(|t| (cp, t)))
        .filter(|(_, t)| t.inliers.len() >= 2)
        .collect()
}

/// Closed-form initialization: full similarity from 3D control points when at
/// least three exist, otherwise the horizontal fit. Returns the transform and
/// whether the fallback was used.
pub fn initial_alignment(
    triangulations: &BTreeMap<String, TriangulatedCp>,
    cps: &[ControlPoint],
) -> Result<(Similarity, bool)> {
    let pairs = usable(triangulations, cps);
    let full: Vec<_> = pairs.iter().filter(|(cp, _)| cp.dim == CpDim::Three).map(|(cp, t)| (t.position, cp.position)).collect();
    if full.len() >= 3 {
        return Ok((umeyama_init(&full)?, false));
    }
    if pairs.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "{} usable control points, need at least 3",
            pairs.len()
        )));
    }
    let horizontal: Vec<_> = pairs.iter().map(|(cp, t)| (t.position, cp.position, cp.dim)).collect();
    Ok((horizontal_init(&horizontal)?, true))
}

#[allow(clippy::too_many_arguments)]
/// Jointly refines the similarity and per-CP proxy points against
/// reprojection and surveyed-position residuals.
pub fn joint_sparse_align(
    triangulations: &BTreeMap<String, TriangulatedCp>,
    observations: &BTreeMap<String, Vec<Observation>>,
    poses: &Trajectory,
    rig: &RigCalibration,
    cps: &[ControlPoint],
    init: &Similarity,
    horizontal_fallback: bool,
    config: &AlignmentConfig,
) -> Result<SparseAlignment> {
    let pairs = usable(triangulations, cps);
    if pairs.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "{} usable control points, need at least 3",
            pairs.len()
        )));
    }
    let mut problem = Problem::new();
    let t_id = problem.add_parameter(encode_similarity(init).to_vec(), Manifold::Similarity);
    let mut proxy_ids = Vec::with_capacity(pairs.len());
    for (cp, tri) in &pairs {
        let pid = problem.add_parameter(tri.position.as_slice().to_vec(), Manifold::Euclidean(3));
        problem.set_eliminate_first(pid, true);
        proxy_ids.push(pid);
        let obs = observations
            .get(&cp.id)
            .ok_or_else(|| Error::InvalidInput(format!("no observations for control point '{}'", cp.id)))?;
        let views = resolve(obs, poses, rig, config.assoc_tol_ns)?;
        for v in views.iter().filter(|v| tri.inliers.contains(&v.index)) {
            let o = &obs[v.index];
            let f = FixedPoseReprojection { camera_from_world: v.camera_from_world, model: v.model.clone(), measured: o.pixel };
            let cov = DMatrix::from_column_slice(2, 2, o.covariance.as_slice());
            problem.add_residual(Box::new(f), vec![pid], Group::MarkerReprojection, cov, RobustLoss::Huber(config.huber))?;
        }
        let f = WorldResidual { measured: cp.position, dims: cp.dim.count() };
        let r = problem.add_residual(Box::new(f), vec![t_id, pid], Group::CpWorld, cp.measurement_covariance(), RobustLoss::None)?;
        problem.set_anchor(r, true);
    }
    let n3 = pairs.iter().filter(|(cp, _)| cp.dim == CpDim::Three).count();
    if horizontal_fallback || n3 == 0 {
        let gauge = VerticalGauge { z0: (n3 == 0).then_some(init.translation.z) };
        let dim = gauge.dim();
        let cov = DMatrix::identity(dim, dim) * GAUGE_PRIOR_SIGMA.powi(2);
        let r = problem.add_residual(Box::new(gauge), vec![t_id], Group::Generic, cov, RobustLoss::None)?;
        problem.set_anchor(r, true);
    }
    let report = solver::solve(&mut problem, &config.solve)?;
    let transform = decode_similarity(problem.parameter(t_id));
    let proxies = pairs
        .iter()
        .zip(&proxy_ids)
        .map(|((cp, _), &pid)| (cp.id.clone(), decode_vec3(problem.parameter(pid))))
        .collect();
    let per_cp = cps
        .iter()
        .map(|cp| {
            let tri = triangulations.get(&cp.id);
            let (error_2d, error_3d) = match tri {
                Some(t) => {
                    let d = transform.apply(&t.position) - cp.position;
                    (d.xy().norm(), (cp.dim == CpDim::Three).then(|| d.norm()))
                }
                None => (f64::INFINITY, (cp.dim == CpDim::Three).then_some(f64::INFINITY)),
            };
            CpAlignment {
                id: cp.id.clone(),
                dim: cp.dim,
                error_2d,
                error_3d,
                metric_covariance: tri.map(|t| propagate_covariance(&t.covariance, &transform)),
                used: pairs.iter().any(|(p, _)| p.id == cp.id),
            }
        })
        .collect();
    Ok(SparseAlignment { transform, proxies, per_cp, horizontal_fallback, report })
}

/// Closed-form initialization followed by joint refinement.
pub fn align(
    triangulations: &BTreeMap<String, TriangulatedCp>,
    observations: &BTreeMap<String, Vec<Observation>>,
    poses: &Trajectory,
    rig: &RigCalibration,
    cps: &[ControlPoint],
    config: &AlignmentConfig,
) -> Result<SparseAlignment> {
    let (init, fallback) = initial_alignment(triangulations, cps)?;
    joint_sparse_align(triangulations, observations, poses, rig, cps, &init, fallback, config)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpError {
    pub id: String,
    /// Meters; ∞ when the control point was not triangulated.
    pub error: f64,
    /// Not part of this evaluation mode (2D points in 3D mode).
    pub excluded: bool,
}

/// Distance between each surveyed point and its transformed triangulation.
pub fn cp_alignment_errors(
    t: &Similarity,
    triangulations: &BTreeMap<String, TriangulatedCp>,
    cps: &[ControlPoint],
    mode: EvalMode,
) -> Vec<CpError> {
    cps.iter()
        .map(|cp| {
            let excluded = mode == EvalMode::ThreeD && cp.dim == CpDim::Two;
            let error = match triangulations.get(&cp.id) {
                _ if excluded => f64::NAN,
                None => f64::INFINITY,
                Some(tri) => {
                    let d = t.apply(&tri.position) - cp.position;
                    match mode {
                        EvalMode::TwoD => d.xy().norm(),
                        EvalMode::ThreeD => d.norm(),
                    }
                }
            };
            CpError { id: cp.id.clone(), error, excluded }
        })
        .collect()
}

/// Errors of the control points that take part in the evaluation.
pub fn scored_errors(errors: &[CpError]) -> Vec<f64> {
    errors.iter().filter(|e| !e.excluded).map(|e| e.error).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.6}"),
        Some(_) => "inf".into(),
        None => String::new(),
    }
}

/// Per-CP alignment report as comma-separated text.
pub fn alignment_report_csv(alignment: &SparseAlignment, cps: &[ControlPoint]) -> String {
    let mut out = String::from("id,dim,used,error_2d,error_3d,triangulation_uncertainty,cp_uncertainty\n");
    for (rec, cp) in alignment.per_cp.iter().zip(cps) {
        let tri_unc = rec.metric_covariance.map(|c| uncertainty(&DMatrix::from_column_slice(3, 3, c.as_slice())));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6}",
            rec.id,
            rec.dim.count(),
            u8::from(rec.used),
            fmt_opt(Some(rec.error_2d)),
            fmt_opt(rec.error_3d),
            fmt_opt(tri_unc),
            uncertainty(&cp.measurement_covariance())
        );
    }
    out
}

#[cfg(test)]
mod tests;
