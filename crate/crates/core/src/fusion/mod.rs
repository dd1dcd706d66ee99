//! Dense pseudo ground truth: joint refinement of keyframe states, control
//! point proxies and landmarks over marker, control-point, feature and
//! inertial factors, with variance-factor reweighting of the visual groups.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::{info, warn};
use nalgebra::{DMatrix, DVector, Matrix6, Vector3};

use crate::alignment::{ControlPoint, CpDim};
use crate::geometry::{RigCalibration, RigidPose};
use crate::inertial::{preintegrate, samples_between, Bias, BiasWalkFactor, ImuFactor, ImuSample};
use crate::reprojection::RigReprojection;
use crate::solver::residuals::{FnResidual, Prior};
use crate::solver::manifold::{decode_pose, decode_vec3, encode_pose};
use crate::solver::{
    self, BlockId, CovarianceEstimator, Evaluation, Group, Manifold, Problem, Residual, ResidualId, RobustLoss,
    SolveOptions, SolveReport,
};
use crate::trajectory::{StampedPose, Trajectory};
use crate::triangulation::{triangulate_cp, FeatureTrack, Observation, TriangulationConfig};
use crate::{Error, Result};

/// Loose prior on the first keyframe bias, keeping the problem well posed
/// on short or weakly exciting segments.
const BIAS_PRIOR_SIGMA: f64 = 1.0;
/// Prior on the first keyframe height when no control point is 3D.
const HEIGHT_PRIOR_SIGMA: f64 = 1e-3;
/// Bounds on the accumulated covariance scaling of a reweighted group.
pub const VARIANCE_FACTOR_BOUNDS: (f64, f64) = (1e-4, 1e4);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Full,
    /// Marker, control-point and inertial factors only.
    InertialOnly,
}

impl FusionMode {
    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::Full => "full",
            FusionMode::InertialOnly => "inertial-only",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub rounds: usize,
    /// Multiplier applied to control point covariances.
    pub cp_deflation: f64,
    pub marker_loss: RobustLoss,
    pub feature_loss: RobustLoss,
    pub keyframe_stride: usize,
    pub mode: FusionMode,
    /// Tolerance matching detection timestamps to keyframes.
    pub assoc_tol_ns: i64,
    pub gravity: Vector3<f64>,
    /// Pixel threshold used when triangulating initial landmarks and proxies.
    pub init_threshold_px: f64,
    pub solve: SolveOptions,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            cp_deflation: 0.25,
            marker_loss: RobustLoss::Huber(3.0),
            feature_loss: RobustLoss::Huber(3.0),
            keyframe_stride: 5,
            mode: FusionMode::Full,
            assoc_tol_ns: 1_000_000,
            gravity: crate::inertial::default_gravity(),
            init_threshold_px: 20.0,
            solve: SolveOptions::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::InvalidInput("at least one reweighting round is required".into()));
        }
        if !(self.cp_deflation > 0.0 && self.cp_deflation <= 1.0) {
            return Err(Error::InvalidInput(format!("deflation {} outside (0, 1]", self.cp_deflation)));
        }
        if self.keyframe_stride == 0 {
            return Err(Error::InvalidInput("keyframe stride must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyframeState {
    pub timestamp_ns: i64,
    pub pose: RigidPose,
    /// World-frame velocity of the IMU origin.
    pub velocity: Vector3<f64>,
    pub bias: Bias,
}

/// Everything the fusion consumes.
#[derive(Clone, Copy)]
pub struct FusionInput<'a> {
    /// Initial device poses, already expressed in the world frame.
    pub init: &'a Trajectory,
    pub tracks: &'a [FeatureTrack],
    pub cp_observations: &'a BTreeMap<String, Vec<Observation>>,
    pub cps: &'a [ControlPoint],
    pub imu: &'a [ImuSample],
    pub rig: &'a RigCalibration,
}

/// The assembled factor graph with handles to its blocks.
pub struct FusionProblem {
    pub problem: Problem,
    pub keyframes: Vec<i64>,
    pub pose_ids: Vec<BlockId>,
    pub velocity_ids: Vec<BlockId>,
    pub bias_ids: Vec<BlockId>,
    pub proxy_ids: BTreeMap<String, BlockId>,
    pub landmark_ids: BTreeMap<u64, BlockId>,
    pub cp_world_ids: BTreeMap<String, ResidualId>,
    pub mode: FusionMode,
}

impl FusionProblem {
    pub fn family_count(&self, group: Group) -> usize {
        self.problem.count_in_group(group)
    }

    pub fn keyframe_states(&self) -> Vec<KeyframeState> {
        (0..self.keyframes.len())
            .map(|k| KeyframeState {
                timestamp_ns: self.keyframes[k],
                pose: decode_pose(self.problem.parameter(self.pose_ids[k])),
                velocity: decode_vec3(self.problem.parameter(self.velocity_ids[k])),
                bias: Bias::from_slice(self.problem.parameter(self.bias_ids[k])),
            })
            .collect()
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory::new(
            self.keyframe_states()
                .into_iter()
                .map(|s| StampedPose { timestamp_ns: s.timestamp_ns, pose: s.pose })
                .collect(),
        )
    }

    /// Whitened world residuals of the control points, in meters scaled by
    /// their (deflated) covariance.
    pub fn cp_world_residuals(&self) -> BTreeMap<String, DVector<f64>> {
        self.cp_world_ids.iter().map(|(id, &r)| (id.clone(), self.problem.whitened_residual(r))).collect()
    }

    /// Adds a marker detection of an existing control point proxy at keyframe `k`.
    pub fn add_marker_observation(&mut self, k: usize, cp_id: &str, obs: &Observation, rig: &RigCalibration, loss: RobustLoss) -> Result<ResidualId> {
        let proxy = *self
            .proxy_ids
            .get(cp_id)
            .ok_or_else(|| Error::InvalidInput(format!("control point '{cp_id}' is not part of the problem")))?;
        add_reprojection(&mut self.problem, rig, obs, self.pose_ids[k], proxy, Group::MarkerReprojection, loss)
    }
}

/// `P̂ − P_W` over the surveyed components. Block: `[proxy]`.
struct CpWorldResidual {
    measured: Vector3<f64>,
    dims: usize,
}

impl Residual for CpWorldResidual {
    fn dim(&self) -> usize {
        self.dims
    }

    fn evaluate(&self, params: &[&[f64]], want_jacobians: bool) -> Evaluation {
        let r = decode_vec3(params[0]) - self.measured;
        Evaluation {
            residual: DVector::from_column_slice(&r.as_slice()[..self.dims]),
            jacobians: want_jacobians.then(|| vec![DMatrix::identity(self.dims, 3)]),
        }
    }
}

fn add_reprojection(
    problem: &mut Problem,
    rig: &RigCalibration,
    obs: &Observation,
    pose: BlockId,
    point: BlockId,
    group: Group,
    loss: RobustLoss,
) -> Result<ResidualId> {
    let cam = rig
        .camera(&obs.camera_id)
        .ok_or_else(|| Error::InvalidInput(format!("unknown camera id '{}'", obs.camera_id)))?;
    let f = RigReprojection { camera_from_device: cam.camera_from_device, model: cam.model.clone(), measured: obs.pixel };
    let cov = DMatrix::from_column_slice(2, 2, obs.covariance.as_slice());
    problem.add_residual(Box::new(f), vec![pose, point], group, cov, loss)
}

fn keyframe_index(keyframes: &[i64], t: i64, tol: i64) -> Option<usize> {
    let i = keyframes.partition_point(|&k| k < t);
    [i.wrapping_sub(1), i]
        .into_iter()
        .filter_map(|j| keyframes.get(j).map(|&k| (j, (k - t).abs())))
        .filter(|&(_, d)| d <= tol)
        .min_by_key(|&(_, d)| d)
        .map(|(j, _)| j)
}

/// Observations that fall on keyframes, paired with the keyframe index.
fn on_keyframes<'a>(obs: &'a [Observation], keyframes: &[i64], tol: i64) -> Vec<(usize, &'a Observation)> {
    obs.iter().filter_map(|o| keyframe_index(keyframes, o.timestamp_ns, tol).map(|k| (k, o))).collect()
}

/// Longest spacing between consecutive samples around `[t0, t1]`, or `None`
/// when the stream does not reach both ends.
fn bracketing_gap(stream: &[ImuSample], t0: i64, t1: i64) -> Option<i64> {
    if stream.is_empty() || stream[0].timestamp_ns > t0 || stream[stream.len() - 1].timestamp_ns < t1 {
        return None;
    }
    let first = stream.partition_point(|s| s.timestamp_ns <= t0).saturating_sub(1);
    let last = stream.partition_point(|s| s.timestamp_ns < t1).min(stream.len() - 1);
    Some(stream[first..=last].windows(2).map(|w| w[1].timestamp_ns - w[0].timestamp_ns).max().unwrap_or(0))
}

fn triangulate_init(
    id: &str,
    obs: &[(usize, &Observation)],
    kf_traj: &Trajectory,
    rig: &RigCalibration,
    config: &FusionConfig,
) -> Option<Vector3<f64>> {
    let list: Vec<Observation> = obs.iter().map(|(_, o)| (*o).clone()).collect();
    let tconf = TriangulationConfig { threshold_px: config.init_threshold_px, assoc_tol_ns: config.assoc_tol_ns, ..Default::default() };
    triangulate_cp(id, &list, kf_traj, rig, &tconf).ok().map(|t| t.position)
}

pub fn build_fusion_problem(input: &FusionInput, config: &FusionConfig) -> Result<FusionProblem> {
    config.validate()?;
    let rig = input.rig;
    let kf: Vec<StampedPose> = input.init.poses.iter().step_by(config.keyframe_stride).copied().collect();
    if kf.is_empty() {
        return Err(Error::InvalidInput("no keyframes".into()));
    }
    let keyframes: Vec<i64> = kf.iter().map(|s| s.timestamp_ns).collect();
    if keyframes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("keyframe timestamps must be strictly increasing".into()));
    }
    let gaps: Vec<String> = keyframes
        .windows(2)
        .filter(|w| bracketing_gap(input.imu, w[0], w[1]).is_none_or(|g| g > w[1] - w[0]))
        .map(|w| format!("[{}, {}]", w[0], w[1]))
        .collect();
    if !gaps.is_empty() {
        return Err(Error::ImuGap(format!("no inertial coverage for keyframe intervals {}", gaps.join(" "))));
    }
    let kf_traj = Trajectory::new(kf.clone());

    let cp_obs: Vec<(&ControlPoint, Vec<(usize, &Observation)>)> = input
        .cps
        .iter()
        .filter_map(|cp| input.cp_observations.get(&cp.id).map(|o| (cp, on_keyframes(o, &keyframes, config.assoc_tol_ns))))
        .filter(|(_, o)| !o.is_empty())
        .collect();
    if cp_obs.is_empty() {
        return Err(Error::Unobservable("no control point is observed on any keyframe".into()));
    }

    let mut problem = Problem::new();

    // Landmarks and proxies first so that elimination order is explicit.
    let mut landmark_ids = BTreeMap::new();
    let mut track_obs = Vec::new();
    if config.mode == FusionMode::Full {
        for track in input.tracks {
            let obs = on_keyframes(&track.observations, &keyframes, config.assoc_tol_ns);
            if obs.len() < 2 {
                continue;
            }
            let Some(p) = triangulate_init(&format!("track {}", track.id), &obs, &kf_traj, rig, config) else { continue };
            let id = problem.add_parameter(p.as_slice().to_vec(), Manifold::Euclidean(3));
            problem.set_eliminate_first(id, true);
            landmark_ids.insert(track.id, id);
            track_obs.push((id, obs));
        }
    }
    let mean_height = kf.iter().map(|s| s.pose.translation.z).sum::<f64>() / kf.len() as f64;
    let mut proxy_ids = BTreeMap::new();
    for (cp, obs) in &cp_obs {
        let init = triangulate_init(&cp.id, obs, &kf_traj, rig, config).unwrap_or(match cp.dim {
            CpDim::Three => cp.position,
            CpDim::Two => Vector3::new(cp.position.x, cp.position.y, mean_height),
        });
        let id = problem.add_parameter(init.as_slice().to_vec(), Manifold::Euclidean(3));
        problem.set_eliminate_first(id, true);
        proxy_ids.insert(cp.id.clone(), id);
    }

    let mut pose_ids = Vec::with_capacity(kf.len());
    let mut velocity_ids = Vec::with_capacity(kf.len());
    let mut bias_ids = Vec::with_capacity(kf.len());
    let imu_pose = |k: usize| kf[k].pose.compose(&rig.imu_from_device.inverse()).translation;
    for k in 0..kf.len() {
        pose_ids.push(problem.add_parameter(encode_pose(&kf[k].pose).to_vec(), Manifold::RigidPose));
        let (a, b) = (k.saturating_sub(1), (k + 1).min(kf.len() - 1));
        let v = if a == b { Vector3::zeros() } else { (imu_pose(b) - imu_pose(a)) / ((keyframes[b] - keyframes[a]) as f64 * 1e-9) };
        velocity_ids.push(problem.add_parameter(v.as_slice().to_vec(), Manifold::Euclidean(3)));
        bias_ids.push(problem.add_parameter(vec![0.0; 6], Manifold::Euclidean(6)));
    }

    for (id, obs) in &track_obs {
        for (k, o) in obs {
            add_reprojection(&mut problem, rig, o, pose_ids[*k], *id, Group::FeatureReprojection, config.feature_loss)?;
        }
    }
    let mut cp_world_ids = BTreeMap::new();
    for (cp, obs) in &cp_obs {
        let proxy = proxy_ids[&cp.id];
        for (k, o) in obs {
            add_reprojection(&mut problem, rig, o, pose_ids[*k], proxy, Group::MarkerReprojection, config.marker_loss)?;
        }
        let f = CpWorldResidual { measured: cp.position, dims: cp.dim.count() };
        let cov = cp.measurement_covariance() * config.cp_deflation;
        let r = problem.add_residual(Box::new(f), vec![proxy], Group::CpWorld, cov, RobustLoss::None)?;
        problem.set_anchor(r, true);
        cp_world_ids.insert(cp.id.clone(), r);
    }

    let noise = &rig.imu_noise;
    for k in 0..kf.len().saturating_sub(1) {
        let (t0, t1) = (keyframes[k], keyframes[k + 1]);
        let samples = samples_between(input.imu, t0, t1).ok_or_else(|| Error::ImuGap(format!("[{t0}, {t1}]")))?;
        let seg = preintegrate(&samples, &Bias::zero(), noise)?;
        if seg.gap_warning {
            warn!("irregular IMU sampling between {t0} and {t1}");
        }
        let cov = DMatrix::from_column_slice(9, 9, seg.covariance.as_slice());
        let dt = seg.dt;
        let f = ImuFactor::new(seg, config.gravity, rig.imu_from_device);
        problem.add_residual(
            Box::new(f),
            vec![pose_ids[k], velocity_ids[k], bias_ids[k], pose_ids[k + 1], velocity_ids[k + 1]],
            Group::ImuPreintegration,
            cov,
            RobustLoss::None,
        )?;
        problem.add_residual(
            Box::new(BiasWalkFactor),
            vec![bias_ids[k], bias_ids[k + 1]],
            Group::BiasWalk,
            BiasWalkFactor::covariance(noise, dt),
            RobustLoss::None,
        )?;
    }
    let prior = Prior { manifold: Manifold::Euclidean(6), mean: vec![0.0; 6] };
    problem.add_residual(Box::new(prior), vec![bias_ids[0]], Group::Generic, DMatrix::identity(6, 6) * BIAS_PRIOR_SIGMA.powi(2), RobustLoss::None)?;

    if !cp_obs.iter().any(|(cp, _)| cp.dim == CpDim::Three) {
        let z0 = kf[0].pose.translation.z;
        let f = FnResidual::new(1, move |p: &[&[f64]]| DVector::from_element(1, p[0][6] - z0));
        let r = problem.add_residual(Box::new(f), vec![pose_ids[0]], Group::Generic, DMatrix::from_element(1, 1, HEIGHT_PRIOR_SIGMA.powi(2)), RobustLoss::None)?;
        problem.set_anchor(r, true);
    }

    info!(
        "fusion problem: {} keyframes, {} landmarks, {} control points",
        keyframes.len(),
        landmark_ids.len(),
        proxy_ids.len()
    );
    Ok(FusionProblem { problem, keyframes, pose_ids, velocity_ids, bias_ids, proxy_ids, landmark_ids, cp_world_ids, mode: config.mode })
}

/// Output of the fusion.
#[derive(Clone, Debug)]
pub struct PseudoGt {
    pub keyframes: Vec<KeyframeState>,
    pub trajectory: Trajectory,
    /// Tangent-space `[δθ, δt]` covariance per keyframe pose.
    pub covariances: Vec<Matrix6<f64>>,
    pub whitened: BTreeMap<Group, Vec<f64>>,
    /// Variance factors estimated in each round, per reweighted group.
    pub variance_factors: Vec<BTreeMap<Group, f64>>,
    /// Product of all applied factors per group.
    pub cumulative_factors: BTreeMap<Group, f64>,
    pub report: SolveReport,
    pub median_position_uncertainty: f64,
}

fn visual_groups(mode: FusionMode) -> &'static [Group] {
    match mode {
        FusionMode::Full => &[Group::FeatureReprojection, Group::MarkerReprojection],
        FusionMode::InertialOnly => &[Group::MarkerReprojection],
    }
}

/// Solves, re-estimates the visual measurement covariances from their
/// variance factors, and repeats; the last solve uses the final weights.
pub fn optimize_pseudo_gt(fp: &mut FusionProblem, config: &FusionConfig) -> Result<PseudoGt> {
    config.validate()?;
    let wrap = |round: usize| move |e: Error| Error::FusionRound { round, source: Box::new(e) };
    let mut variance_factors = Vec::new();
    let mut cumulative: BTreeMap<Group, f64> = BTreeMap::new();
    for round in 0..config.rounds {
        let report = solver::solve(&mut fp.problem, &config.solve).map_err(wrap(round))?;
        let mut factors = BTreeMap::new();
        for &g in visual_groups(fp.mode) {
            if fp.problem.count_in_group(g) == 0 {
                continue;
            }
            match solver::variance_factor(&report, g) {
                Ok(f) if f.is_finite() && f > 0.0 => {
                    let total = cumulative.entry(g).or_insert(1.0);
                    let (lo, hi) = VARIANCE_FACTOR_BOUNDS;
                    let applied = (*total * f).clamp(lo, hi) / *total;
                    if applied != f {
                        warn!("round {round}: {g} variance factor {f:e} clamped to {applied:e}");
                    }
                    fp.problem.scale_group_covariance(g, applied).map_err(wrap(round))?;
                    *total *= applied;
                    factors.insert(g, f);
                }
                Ok(_) => {}
                Err(e) => warn!("round {round}: {g} not reweighted: {e}"),
            }
        }
        info!("round {round}: variance factors {factors:?}");
        variance_factors.push(factors);
    }
    let report = solver::solve(&mut fp.problem, &config.solve).map_err(wrap(config.rounds))?;
    let covariances = pose_covariances(fp)?;
    Ok(PseudoGt {
        keyframes: fp.keyframe_states(),
        trajectory: fp.trajectory(),
        median_position_uncertainty: median_position_uncertainty(&covariances),
        covariances,
        whitened: whitened_residuals(&report),
        variance_factors,
        cumulative_factors: cumulative,
        report,
    })
}

/// Fusion without feature tracks.
pub fn inertial_only_optimize(input: &FusionInput, config: &FusionConfig) -> Result<PseudoGt> {
    let config = FusionConfig { mode: FusionMode::InertialOnly, ..config.clone() };
    let mut fp = build_fusion_problem(input, &config)?;
    optimize_pseudo_gt(&mut fp, &config)
}

/// Marginal covariance of every keyframe pose at the current solution.
pub fn pose_covariances(fp: &FusionProblem) -> Result<Vec<Matrix6<f64>>> {
    let est = CovarianceEstimator::new(&fp.problem)?;
    Ok(est.blocks(&fp.pose_ids)?.into_iter().map(|c| Matrix6::from_iterator(c.iter().copied())).collect())
}

/// Square root of the spectral norm of the position block.
pub fn position_uncertainty(cov: &Matrix6<f64>) -> f64 {
    cov.fixed_view::<3, 3>(3, 3).into_owned().symmetric_eigenvalues().amax().sqrt()
}

pub fn median_position_uncertainty(covs: &[Matrix6<f64>]) -> f64 {
    let mut u: Vec<f64> = covs.iter().map(position_uncertainty).collect();
    if u.is_empty() {
        return f64::NAN;
    }
    u.sort_by(f64::total_cmp);
    let n = u.len();
    if n % 2 == 1 {
        u[n / 2]
    } else {
        0.5 * (u[n / 2 - 1] + u[n / 2])
    }
}

/// Whitened residual components per factor family.
pub fn whitened_residuals(report: &SolveReport) -> BTreeMap<Group, Vec<f64>> {
    report.groups.iter().map(|(g, r)| (*g, r.whitened.clone())).collect()
}

/// Keyframe timestamp followed by the 21 upper-triangle entries of each pose
/// covariance, row by row.
pub fn covariance_sidecar_csv(timestamps: &[i64], covs: &[Matrix6<f64>]) -> String {
    let mut out = crate::io::covariance_header();
    out.push('\n');
    for (t, c) in timestamps.iter().zip(covs) {
        let _ = write!(out, "{t}");
        for i in 0..6 {
            for j in i..6 {
                let _ = write!(out, ",{:e}", c[(i, j)]);
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests;
