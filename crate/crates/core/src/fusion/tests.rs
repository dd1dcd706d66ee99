use nalgebra::Matrix2;

use super::*;
use crate::synth::{gen_detections, gen_imu_for, gen_world, perturb_trajectory, PerturbModel, SynthConfig, SynthDetections, SynthWorld};

struct Scenario {
    config: SynthConfig,
    world: SynthWorld,
    det: SynthDetections,
    imu: Vec<ImuSample>,
}

impl Scenario {
    fn new(config: SynthConfig) -> Self {
        let world = gen_world(&config).unwrap();
        let det = gen_detections(&world, &config);
        let imu = gen_imu_for(&world, &config);
        Self { config, world, det, imu }
    }

    fn input<'a>(&'a self, init: &'a Trajectory) -> FusionInput<'a> {
        FusionInput {
            init,
            tracks: &self.det.tracks,
            cp_observations: &self.det.cp_observations,
            cps: &self.world.control_points,
            imu: &self.imu,
            rig: &self.config.rig,
        }
    }
}

fn short(seed: u64) -> SynthConfig {
    SynthConfig { duration_s: 15.0, landmark_count: 150, ..SynthConfig::figure8(seed) }
}

fn max_position_error(est: &Trajectory, truth: &Trajectory) -> f64 {
    est.poses
        .iter()
        .map(|s| (s.pose.translation - truth.pose_at(s.timestamp_ns, 0).unwrap().translation).norm())
        .fold(0.0, f64::max)
}

#[test]
fn family_counts_match_keyframe_observations() {
    let s = Scenario::new(short(1));
    let config = FusionConfig::default();
    let fp = build_fusion_problem(&s.input(&s.world.trajectory), &config).unwrap();
    let k = fp.keyframes.len();
    assert_eq!(k, s.world.trajectory.len().div_ceil(5));
    let on_kf = |o: &Observation| fp.keyframes.binary_search(&o.timestamp_ns).is_ok();
    let markers = s.det.cp_observations.values().flatten().filter(|o| on_kf(o)).count();
    assert_eq!(fp.family_count(Group::MarkerReprojection), markers);
    let features: usize = s
        .det
        .tracks
        .iter()
        .filter(|t| fp.landmark_ids.contains_key(&t.id))
        .map(|t| t.observations.iter().filter(|o| on_kf(o)).count())
        .sum();
    assert!(features > 0);
    assert_eq!(fp.family_count(Group::FeatureReprojection), features);
    assert_eq!(fp.family_count(Group::CpWorld), s.world.control_points.len());
    assert_eq!(fp.family_count(Group::ImuPreintegration), k - 1);
    assert_eq!(fp.family_count(Group::BiasWalk), k - 1);
}

#[test]
fn inertial_only_has_no_feature_factors() {
    let s = Scenario::new(short(2));
    let config = FusionConfig { mode: FusionMode::InertialOnly, ..Default::default() };
    let fp = build_fusion_problem(&s.input(&s.world.trajectory), &config).unwrap();
    assert_eq!(fp.family_count(Group::FeatureReprojection), 0);
    assert!(fp.landmark_ids.is_empty());
    assert!(fp.family_count(Group::MarkerReprojection) > 0);
}

#[test]
fn missing_imu_interval_is_reported() {
    let mut s = Scenario::new(short(3));
    let kf: Vec<i64> = s.world.trajectory.poses.iter().step_by(5).map(|p| p.timestamp_ns).collect();
    let (t0, t1) = (kf[10], kf[11]);
    s.imu.retain(|x| x.timestamp_ns <= t0 - 5_000_000 || x.timestamp_ns >= t1 + 5_000_000);
    let err = build_fusion_problem(&s.input(&s.world.trajectory), &FusionConfig::default()).err().unwrap();
    let Error::ImuGap(msg) = err else { panic!("{err:?}") };
    assert!(msg.contains(&format!("[{t0}, {t1}]")), "{msg}");
}

#[test]
fn no_control_point_observations_is_unobservable() {
    let mut s = Scenario::new(short(4));
    s.det.cp_observations.values_mut().for_each(Vec::clear);
    let err = build_fusion_problem(&s.input(&s.world.trajectory), &FusionConfig::default()).err().unwrap();
    assert!(matches!(err, Error::Unobservable(_)), "{err:?}");
}

#[test]
fn noiseless_recovery_from_perturbed_init() {
    let s = Scenario::new(short(5));
    let init = perturb_trajectory(&s.world.trajectory, &PerturbModel { sigma_pos: 0.1, sigma_rot: 1f64.to_radians(), ..Default::default() }, 11);
    for mode in [FusionMode::Full, FusionMode::InertialOnly] {
        let config = FusionConfig { mode, ..Default::default() };
        let mut fp = build_fusion_problem(&s.input(&init), &config).unwrap();
        let gt = optimize_pseudo_gt(&mut fp, &config).unwrap();
        let err = max_position_error(&gt.trajectory, &s.world.trajectory);
        assert!(err < 1e-4, "{}: {err}", mode.name());
        assert_eq!(gt.covariances.len(), gt.keyframes.len());
        assert!(gt.median_position_uncertainty > 0.0);
    }
}

#[test]
fn variance_factor_recovers_underestimated_feature_noise() {
    let mut s = Scenario::new(SynthConfig { feature_sigma_px: 2.0, ..short(6) });
    for t in &mut s.det.tracks {
        for o in &mut t.observations {
            o.covariance = Matrix2::identity();
        }
    }
    let config = FusionConfig::default();
    let mut fp = build_fusion_problem(&s.input(&s.world.trajectory), &config).unwrap();
    let gt = optimize_pseudo_gt(&mut fp, &config).unwrap();
    let f = gt.cumulative_factors[&Group::FeatureReprojection];
    assert!((f - 4.0).abs() < 0.8, "{f}");
    let w = &gt.whitened[&Group::FeatureReprojection];
    let std = (w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64).sqrt();
    assert!((0.9..=1.1).contains(&std), "{std}");
    assert_eq!(gt.variance_factors.len(), config.rounds);
    assert!(!gt.cumulative_factors.contains_key(&Group::CpWorld));
    assert!(!gt.cumulative_factors.contains_key(&Group::ImuPreintegration));
}

#[test]
fn stronger_control_points_shrink_uncertainty() {
    let s = Scenario::new(short(7));
    let mut previous = f64::INFINITY;
    for deflation in [1.0, 0.25, 0.05] {
        let config = FusionConfig { cp_deflation: deflation, rounds: 1, ..Default::default() };
        let mut fp = build_fusion_problem(&s.input(&s.world.trajectory), &config).unwrap();
        let gt = optimize_pseudo_gt(&mut fp, &config).unwrap();
        assert!(gt.median_position_uncertainty < previous, "{deflation}");
        previous = gt.median_position_uncertainty;
    }
}

#[test]
fn single_pose_prior_passes_through() {
    let mut problem = Problem::new();
    let id = problem.add_parameter(encode_pose(&RigidPose::identity()).to_vec(), Manifold::RigidPose);
    let mut cov = DMatrix::identity(6, 6) * 1e-4;
    for i in 3..6 {
        cov[(i, i)] = 0.04;
    }
    let prior = Prior { manifold: Manifold::RigidPose, mean: encode_pose(&RigidPose::identity()).to_vec() };
    let r = problem.add_residual(Box::new(prior), vec![id], Group::Generic, cov, RobustLoss::None).unwrap();
    problem.set_anchor(r, true);
    let fp = FusionProblem {
        problem,
        keyframes: vec![0],
        pose_ids: vec![id],
        velocity_ids: vec![],
        bias_ids: vec![],
        proxy_ids: BTreeMap::new(),
        landmark_ids: BTreeMap::new(),
        cp_world_ids: BTreeMap::new(),
        mode: FusionMode::Full,
    };
    let covs = pose_covariances(&fp).unwrap();
    assert!((position_uncertainty(&covs[0]) - 0.2).abs() < 1e-9);
}

#[test]
fn extra_observation_adds_information() {
    let s = Scenario::new(short(8));
    let config = FusionConfig::default();
    let mut fp = build_fusion_problem(&s.input(&s.world.trajectory), &config).unwrap();
    let before = pose_covariances(&fp).unwrap();
    let k = 20;
    let t = fp.keyframes[k];
    let (cp, obs) = s
        .det
        .cp_observations
        .iter()
        .find_map(|(id, v)| v.iter().find(|o| o.timestamp_ns == t).map(|o| (id.clone(), o.clone())))
        .unwrap();
    fp.add_marker_observation(k, &cp, &obs, &s.config.rig, RobustLoss::None).unwrap();
    let after = pose_covariances(&fp).unwrap();
    let diff = before[k] - after[k];
    let min_eig = diff.symmetric_eigenvalues().min();
    assert!(min_eig > -1e-9 * before[k].trace(), "{min_eig}");
    assert!(diff.trace() > 0.0);
}

#[test]
fn whitened_residuals_scale_with_covariance() {
    let s = Scenario::new(SynthConfig { feature_sigma_px: 1.0, detection_sigma_px: 1.0, ..short(9) });
    let mut fp = build_fusion_problem(&s.input(&s.world.trajectory), &FusionConfig::default()).unwrap();
    let a = fp.problem.whitened_by_group()[&Group::FeatureReprojection].clone();
    fp.problem.scale_group_covariance(Group::FeatureReprojection, 4.0).unwrap();
    let b = &fp.problem.whitened_by_group()[&Group::FeatureReprojection];
    for (x, y) in a.iter().zip(b) {
        assert!((x - 2.0 * y).abs() < 1e-9 * x.abs().max(1.0));
    }
}

#[test]
fn covariance_sidecar_layout() {
    let mut c = Matrix6::zeros();
    for i in 0..6 {
        for j in 0..6 {
            c[(i, j)] = (10 * i.min(j) + i.max(j)) as f64;
        }
    }
    let csv = covariance_sidecar_csv(&[5, 7], &[c, c]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields.len(), 22);
    assert_eq!(fields[0], "5");
    assert_eq!(fields[2].parse::<f64>().unwrap(), 1.0);
    assert_eq!(fields[7].parse::<f64>().unwrap(), 11.0);
    assert_eq!(fields[21].parse::<f64>().unwrap(), 55.0);
}

#[test]
fn keyframe_matching_respects_tolerance() {
    let kf = [0, 250_000_000, 500_000_000];
    assert_eq!(keyframe_index(&kf, 250_000_400, 1_000), Some(1));
    assert_eq!(keyframe_index(&kf, 260_000_000, 1_000_000), None);
    assert_eq!(keyframe_index(&kf, -10, 100), Some(0));
}



fn rms(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    (s / n as f64).sqrt()
}

#[test]
fn deflation_pulls_proxies_to_surveyed_points() {
    let s = Scenario::new(SynthConfig { cp_measurement_noise: true, detection_sigma_px: 1.0, feature_sigma_px: 1.0, ..short(10) });
    let offsets = |deflation: f64| {
        let config = FusionConfig { cp_deflation: deflation, ..Default::default() };
        let mut fp = build_fusion_problem(&s.input(&s.world.trajectory), &config).unwrap();
        optimize_pseudo_gt(&mut fp, &config).unwrap();
        rms(s.world.control_points.iter().flat_map(|cp| {
            let p = decode_vec3(fp.problem.parameter(fp.proxy_ids[&cp.id]));
            (p - cp.position).iter().take(cp.dim.count()).copied().collect::<Vec<_>>()
        }))
    };
    let (full, deflated) = (offsets(1.0), offsets(0.25));
    assert!(deflated < full, "{deflated} vs {full}");
}

#[test]
fn noiseless_whitened_residuals_vanish() {
    // A dense inertial stream keeps the preintegration discretization below the bound.
    let s = Scenario::new(SynthConfig { imu_rate_hz: 10_000.0, ..short(11) });
    let config = FusionConfig::default();
    let mut fp = build_fusion_problem(&s.input(&s.world.trajectory), &config).unwrap();
    let whitened = whitened_residuals(&solver::solve(&mut fp.problem, &config.solve).unwrap());
    for g in [Group::MarkerReprojection, Group::FeatureReprojection, Group::CpWorld, Group::ImuPreintegration] {
        let max = whitened[&g].iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max < 1e-6, "{g}: {max}");
    }
}

#[test]
fn whitened_std_tracks_injected_noise() {
    let std_for = |sigma: f64| {
        let mut s = Scenario::new(SynthConfig { feature_sigma_px: sigma, ..short(12) });
        for t in &mut s.det.tracks {
            t.observations.iter_mut().for_each(|o| o.covariance = Matrix2::identity());
        }
        let config = FusionConfig { feature_loss: RobustLoss::None, ..Default::default() };
        let mut fp = build_fusion_problem(&s.input(&s.world.trajectory), &config).unwrap();
        let report = solver::solve(&mut fp.problem, &config.solve).unwrap();
        rms(whitened_residuals(&report)[&Group::FeatureReprojection].iter().copied())
    };
    let ratio = std_for(2.0) / std_for(1.0);
    assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
}

#[test]
fn inertial_only_stays_close_to_full_fusion_on_platform() {
    let config = SynthConfig {
        duration_s: 15.0,
        landmark_count: 150,
        detection_sigma_px: 1.0,
        feature_sigma_px: 1.0,
        imu_noise_enabled: true,
        ..SynthConfig::platform(13)
    };
    let s = Scenario::new(config);
    let init = perturb_trajectory(&s.world.trajectory, &PerturbModel { sigma_pos: 0.05, sigma_rot: 0.5f64.to_radians(), ..Default::default() }, 3);
    let rms_err = |gt: &PseudoGt| {
        rms(gt.trajectory.poses.iter().map(|p| (p.pose.translation - s.world.trajectory.pose_at(p.timestamp_ns, 0).unwrap().translation).norm()))
    };
    let fconf = FusionConfig::default();
    let mut fp = build_fusion_problem(&s.input(&init), &fconf).unwrap();
    let full = rms_err(&optimize_pseudo_gt(&mut fp, &fconf).unwrap());
    let inertial = rms_err(&inertial_only_optimize(&s.input(&init), &fconf).unwrap());
    assert!(inertial <= 5.0 * full, "{inertial} vs {full}");
}

#[test]
fn noiseless_inertial_only_is_exact_at_cp_keyframes() {
    let s = Scenario::new(short(14));
    let init = perturb_trajectory(&s.world.trajectory, &PerturbModel { sigma_pos: 0.05, sigma_rot: 0.5f64.to_radians(), ..Default::default() }, 5);
    let gt = inertial_only_optimize(&s.input(&init), &FusionConfig::default()).unwrap();
    let observed: std::collections::BTreeSet<i64> = s.det.cp_observations.values().flatten().map(|o| o.timestamp_ns).collect();
    for k in gt.keyframes.iter().filter(|k| observed.contains(&k.timestamp_ns)) {
        let truth = s.world.trajectory.pose_at(k.timestamp_ns, 0).unwrap();
        assert!((k.pose.translation - truth.translation).norm() < 1e-3);
    }
}

#[test]
fn fusion_is_deterministic() {
    let s = Scenario::new(SynthConfig { detection_sigma_px: 1.0, feature_sigma_px: 1.0, ..short(15) });
    let run = || {
        let config = FusionConfig::default();
        let mut fp = build_fusion_problem(&s.input(&s.world.trajectory), &config).unwrap();
        let gt = optimize_pseudo_gt(&mut fp, &config).unwrap();
        covariance_sidecar_csv(&fp.keyframes, &gt.covariances)
    };
    assert_eq!(run(), run());
}

#[test]
fn inertial_families_whiten_to_unit_variance_at_truth() {
    let config = SynthConfig { imu_noise_enabled: true, ..SynthConfig::figure8(21) };
    let world = gen_world(&config).unwrap();
    let det = gen_detections(&world, &config);
    let stream = crate::synth::gen_imu_stream_for(&world, &config);
    let input = FusionInput {
        init: &world.trajectory,
        tracks: &det.tracks,
        cp_observations: &det.cp_observations,
        cps: &world.control_points,
        imu: &stream.samples,
        rig: &config.rig,
    };
    let mut fp = build_fusion_problem(&input, &FusionConfig::default()).unwrap();
    for (k, &t) in fp.keyframes.clone().iter().enumerate() {
        let i = world.trajectory.nearest(t, 0).unwrap();
        fp.problem.set_parameter(fp.velocity_ids[k], world.velocities[i].as_slice().to_vec());
        fp.problem.set_parameter(fp.bias_ids[k], stream.bias_at(t).unwrap().to_array().to_vec());
    }
    let white = fp.problem.whitened_by_group();
    for g in [Group::ImuPreintegration, Group::BiasWalk] {
        let w = &white[&g];
        assert!(w.len() > 1000);
        let std = (w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64).sqrt();
        assert!((0.9..1.1).contains(&std), "{g}: {std}");
    }
}
