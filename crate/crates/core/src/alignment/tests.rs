use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::geometry::{CameraModel, RigCamera, RigidPose};
use crate::inertial::ImuNoise;
use crate::trajectory::StampedPose;
use crate::triangulation::{triangulate_cp, TriangulationConfig};

fn random_sim3(rng: &mut impl Rng) -> Similarity {
    let axis = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    Similarity::new(
        rng.random_range(0.3..3.0),
        Rotation::exp(&axis),
        Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-5.0..5.0)),
    )
}

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n).map(|_| Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-3.0..3.0))).collect()
}

#[test]
fn umeyama_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts = random_points(&mut rng, 6);
    let pairs: Vec<_> = pts.iter().map(|p| (*p, *p)).collect();
    let t = umeyama_init(&pairs).unwrap();
    assert!((t.scale - 1.0).abs() < 1e-12);
    assert!(t.rotation.angle_to(&Rotation::identity()) < 1e-12);
    assert!(t.translation.norm() < 1e-12);
}

#[test]
fn umeyama_recovers_random_similarity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let g = random_sim3(&mut rng);
        let pts = random_points(&mut rng, 10);
        let pairs: Vec<_> = pts.iter().map(|p| (*p, g.apply(p))).collect();
        let t = umeyama_init(&pairs).unwrap();
        assert!((t.scale - g.scale).abs() < 1e-9);
        assert!(t.rotation.angle_to(&g.rotation) < 1e-9);
        assert!((t.translation - g.translation).norm() < 1e-9);
    }
}

#[test]
fn umeyama_rejects_collinear_and_small_sets() {
    let line: Vec<_> = (0..3).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 1.0)).map(|p| (p, p)).collect();
    assert!(matches!(umeyama_init(&line), Err(Error::DegenerateConfiguration(_))));
    assert!(matches!(umeyama_init(&line[..2]), Err(Error::DegenerateConfiguration(_))));
}

#[test]
fn umeyama_never_returns_reflection() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts = random_points(&mut rng, 8);
    let pairs: Vec<_> = pts.iter().map(|p| (*p, Vector3::new(p.x, p.y, -p.z))).collect();
    let t = umeyama_init(&pairs).unwrap();
    assert!((t.rotation.matrix().determinant() - 1.0).abs() < 1e-9);
}

#[test]
fn horizontal_fit_recovers_yaw_similarity() {
    let g = Similarity::new(1.7, Rotation::exp(&Vector3::new(0.0, 0.0, 2.1)), Vector3::new(3.0, -4.0, 1.5));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<_> = random_points(&mut rng, 5)
        .iter()
        .enumerate()
        .map(|(i, p)| (*p, g.apply(p), if i == 0 { CpDim::Three } else { CpDim::Two }))
        .collect();
    let t = horizontal_init(&pairs).unwrap();
    assert!((t.scale - g.scale).abs() < 1e-12);
    assert!(t.rotation.angle_to(&g.rotation) < 1e-12);
    assert!((t.translation - g.translation).norm() < 1e-9);
}

#[test]
fn propagate_covariance_examples() {
    let cov = Matrix3::new(2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5);
    assert_eq!(propagate_covariance(&cov, &Similarity::identity()), cov);
    let doubled = Similarity::new(2.0, Rotation::identity(), Vector3::new(1.0, 2.0, 3.0));
    assert!((propagate_covariance(&cov, &doubled) - cov * 4.0).amax() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = random_sim3(&mut rng);
    let out = propagate_covariance(&cov, &t);
    let r = t.rotation.to_rotation_matrix_naive();
    let oracle = (r * cov * r.transpose()) * t.scale.powi(2);
    assert!((out - oracle).amax() < 1e-12);
    let mut a: Vec<f64> = SymmetricEigen::new(out).eigenvalues.iter().copied().collect();
    let mut b: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|l| l * t.scale.powi(2)).collect();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9);
    }
}

trait NaiveMatrix {
    fn to_rotation_matrix_naive(&self) -> Matrix3<f64>;
}

impl NaiveMatrix for Rotation {
    /// Rotation matrix built column by column from rotated basis vectors.
    fn to_rotation_matrix_naive(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.rotate(&Vector3::x()), self.rotate(&Vector3::y()), self.rotate(&Vector3::z())])
    }
}

fn tri(id: &str, p: Vector3<f64>) -> (String, TriangulatedCp) {
    (
        id.to_string(),
        TriangulatedCp {
            cp_id: id.into(),
            position: p,
            covariance: Matrix3::identity() * 1e-4,
            inliers: vec![0, 1],
            mean_reprojection_error: 0.0,
        },
    )
}

#[test]
fn cp_alignment_error_examples() {
    let cps = vec![
        ControlPoint::new_3d("exact", Vector3::new(1.0, 2.0, 3.0), 0.01, 0.02),
        ControlPoint::new_2d("vertical", 4.0, 5.0, 0.01),
        ControlPoint::new_3d("planar", Vector3::new(0.0, 0.0, 0.0), 0.01, 0.02),
        ControlPoint::new_3d("missing", Vector3::zeros(), 0.01, 0.02),
    ];
    let tris: BTreeMap<_, _> = [
        tri("exact", Vector3::new(1.0, 2.0, 3.0)),
        tri("vertical", Vector3::new(4.0, 5.0, 5.0)),
        tri("planar", Vector3::new(3.0, 4.0, 0.0)),
    ]
    .into_iter()
    .collect();
    let t = Similarity::identity();
    let e2 = cp_alignment_errors(&t, &tris, &cps, EvalMode::TwoD);
    assert_eq!(e2.iter().map(|e| e.error).collect::<Vec<_>>(), vec![0.0, 0.0, 5.0, f64::INFINITY]);
    assert!(e2.iter().all(|e| !e.excluded));
    let e3 = cp_alignment_errors(&t, &tris, &cps, EvalMode::ThreeD);
    assert!(e3[1].excluded);
    assert_eq!(scored_errors(&e3), vec![0.0, 5.0, f64::INFINITY]);
}

struct Scene {
    rig: RigCalibration,
    world_poses: Trajectory,
    cps: Vec<ControlPoint>,
}

fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> RigidPose {
    let z = (target - center).normalize();
    let x = Vector3::z().cross(&z).normalize();
    let y = z.cross(&x);
    RigidPose::new(Rotation::from_matrix(&Matrix3::from_columns(&[x, y, z])), center)
}

fn scene(n_cps: usize, n_2d: usize, seed: u64) -> Scene {
    let rig = RigCalibration {
        cameras: vec![RigCamera {
            id: "cam0".into(),
            model: CameraModel::pinhole(300.0, 300.0, 320.0, 240.0, 640, 480),
            camera_from_device: RigidPose::identity(),
        }],
        imu_from_device: RigidPose::identity(),
        imu_noise: ImuNoise::default(),
    };
    let poses = (0..24)
        .map(|i| {
            let a = i as f64 / 24.0 * std::f64::consts::TAU;
            let c = Vector3::new(9.0 * a.cos(), 9.0 * a.sin(), 1.5);
            StampedPose { timestamp_ns: i * 50_000_000, pose: look_at(c, Vector3::new(0.0, 0.0, 1.0)) }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cps = (0..n_cps)
        .map(|i| {
            let p = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..2.0));
            if i < n_2d {
                let mut cp = ControlPoint::new_2d(format!("cp{i:02}"), p.x, p.y, 0.01);
                cp.position.z = p.z;
                cp
            } else {
                ControlPoint::new_3d(format!("cp{i:02}"), p, 0.01, 0.02)
            }
        })
        .collect();
    Scene { rig, world_poses: Trajectory::new(poses), cps }
}

type Obs = BTreeMap<String, Vec<Observation>>;

/// Detections of the true world positions, optionally noisy. The 2D control
/// points keep their true height in `position.z` only for rendering.
fn detect(s: &Scene, sigma: f64, rng: &mut impl Rng) -> Obs {
    let model = &s.rig.cameras[0].model;
    let noise = Normal::new(0.0, 1.0).unwrap();
    s.cps
        .iter()
        .map(|cp| {
            let obs = s
                .world_poses
                .poses
                .iter()
                .filter_map(|sp| {
                    let px = model.project(&sp.pose.inverse().apply(&cp.position)).ok()?;
                    let n = Vector2::new(noise.sample(rng), noise.sample(rng)) * sigma;
                    let mut o = Observation::new(sp.timestamp_ns, "cam0", px + n);
                    o.covariance *= sigma.max(1e-3).powi(2);
                    Some(o)
                })
                .collect();
            (cp.id.clone(), obs)
        })
        .collect()
}

fn triangulate_all(obs: &Obs, poses: &Trajectory, rig: &RigCalibration) -> BTreeMap<String, TriangulatedCp> {
    obs.iter()
        .filter_map(|(id, o)| triangulate_cp(id, o, poses, rig, &TriangulationConfig::default()).ok().map(|t| (id.clone(), t)))
        .collect()
}

fn flatten_2d(cps: &mut [ControlPoint]) {
    for cp in cps.iter_mut().filter(|c| c.dim == CpDim::Two) {
        cp.position.z = 0.0;
    }
}

#[test]
fn noiseless_joint_alignment_recovers_transform() {
    let mut s = scene(8, 3, 10);
    let obs = detect(&s, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    flatten_2d(&mut s.cps);
    let g = Similarity::new(0.4, Rotation::exp(&Vector3::new(0.1, -0.2, 1.3)), Vector3::new(2.0, -1.0, 0.5));
    let local = s.world_poses.transformed(&g.inverse());
    let tris = triangulate_all(&obs, &local, &s.rig);
    assert_eq!(tris.len(), 8);
    let a = align(&tris, &obs, &local, &s.rig, &s.cps, &AlignmentConfig::default()).unwrap();
    assert!(!a.horizontal_fallback);
    assert!((a.transform.scale - g.scale).abs() < 1e-8);
    for rec in &a.per_cp {
        assert!(rec.error_2d < 1e-6, "{rec:?}");
        if let Some(e3) = rec.error_3d {
            assert!(e3 < 1e-6 && rec.error_2d <= e3);
        }
    }
}

#[test]
fn exact_initialization_is_a_fixed_point() {
    let s = scene(6, 0, 11);
    let obs = detect(&s, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    let tris = triangulate_all(&obs, &s.world_poses, &s.rig);
    let a = joint_sparse_align(&tris, &obs, &s.world_poses, &s.rig, &s.cps, &Similarity::identity(), false, &AlignmentConfig::default())
        .unwrap();
    assert!((a.report.final_cost - a.report.initial_cost).abs() <= 1e-12);
}

#[test]
fn too_few_control_points_is_degenerate() {
    let s = scene(2, 0, 12);
    let obs = detect(&s, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    let tris = triangulate_all(&obs, &s.world_poses, &s.rig);
    let err = align(&tris, &obs, &s.world_poses, &s.rig, &s.cps, &AlignmentConfig::default()).unwrap_err();
    assert!(err.is_degenerate());
}

#[test]
fn horizontal_only_control_points_use_fallback() {
    let mut s = scene(5, 5, 13);
    let obs = detect(&s, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    flatten_2d(&mut s.cps);
    let g = Similarity::new(1.3, Rotation::exp(&Vector3::new(0.0, 0.0, -0.7)), Vector3::new(2.0, -1.0, 0.0));
    let local = s.world_poses.transformed(&g.inverse());
    let tris = triangulate_all(&obs, &local, &s.rig);
    let a = align(&tris, &obs, &local, &s.rig, &s.cps, &AlignmentConfig::default()).unwrap();
    assert!(a.horizontal_fallback);
    assert!(a.per_cp.iter().all(|r| r.error_2d < 1e-6 && r.error_3d.is_none()));
}

fn noisy_case(seed: u64) -> (Scene, Obs, BTreeMap<String, TriangulatedCp>) {
    let mut s = scene(7, 2, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = detect(&s, 1.0, &mut rng);
    flatten_2d(&mut s.cps);
    let noise = Normal::new(0.0, 0.01).unwrap();
    for cp in &mut s.cps {
        cp.position += Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
    }
    let tris = triangulate_all(&obs, &s.world_poses, &s.rig);
    (s, obs, tris)
}

#[test]
fn inflated_detection_covariance_downweights_control_point() {
    let (mut s, mut obs, tris) = noisy_case(14);
    let victim = s.cps[4].id.clone();
    s.cps[4].position.x += 0.3;
    let config = AlignmentConfig::default();
    let base = align(&tris, &obs, &s.world_poses, &s.rig, &s.cps, &config).unwrap().transform;
    let reduced: Vec<_> = s.cps.iter().filter(|c| c.id != victim).cloned().collect();
    let deleted = align(&tris, &obs, &s.world_poses, &s.rig, &reduced, &config).unwrap().transform;
    for o in obs.get_mut(&victim).unwrap() {
        o.covariance *= 100.0;
    }
    let inflated = align(&tris, &obs, &s.world_poses, &s.rig, &s.cps, &config).unwrap().transform;
    let pts: Vec<_> = tris.values().map(|t| t.position).collect();
    assert!(inflated.max_discrepancy(&deleted, &pts) < base.max_discrepancy(&deleted, &pts));
}

#[test]
fn joint_refinement_does_not_increase_cost() {
    let (s, obs, tris) = noisy_case(15);
    let a = align(&tris, &obs, &s.world_poses, &s.rig, &s.cps, &AlignmentConfig::default()).unwrap();
    assert!(a.report.final_cost <= a.report.initial_cost);
    for rec in &a.per_cp {
        if let Some(e3) = rec.error_3d {
            assert!(rec.error_2d <= e3);
        }
    }
}

#[test]
fn gauge_consistency_under_local_similarity() {
    let (s, obs, tris) = noisy_case(16);
    let config = AlignmentConfig::default();
    let a = align(&tris, &obs, &s.world_poses, &s.rig, &s.cps, &config).unwrap();
    let g = Similarity::new(2.5, Rotation::exp(&Vector3::new(0.3, 0.2, -1.0)), Vector3::new(-4.0, 7.0, 1.0));
    let moved_poses = s.world_poses.transformed(&g);
    let moved_tris = triangulate_all(&obs, &moved_poses, &s.rig);
    let b = align(&moved_tris, &obs, &moved_poses, &s.rig, &s.cps, &config).unwrap();
    let expected = a.transform.compose(&g.inverse());
    let pts: Vec<_> = moved_tris.values().map(|t| t.position).collect();
    assert!(b.transform.max_discrepancy(&expected, &pts) < 1e-7);
    for (x, y) in a.per_cp.iter().zip(&b.per_cp) {
        assert!((x.error_2d - y.error_2d).abs() < 1e-9, "{} vs {}", x.error_2d, y.error_2d);
    }
}

#[test]
fn report_lists_every_control_point() {
    let (s, obs, tris) = noisy_case(17);
    let a = align(&tris, &obs, &s.world_poses, &s.rig, &s.cps, &AlignmentConfig::default()).unwrap();
    let csv = alignment_report_csv(&a, &s.cps);
    assert_eq!(csv.lines().count(), s.cps.len() + 1);
    assert!(csv.lines().nth(1).unwrap().starts_with("cp00,2,1,"));
}

proptest! {
    #[test]
    fn horizontal_error_never_exceeds_full_error(x in -5.0..5.0f64, y in -5.0..5.0f64, z in -5.0..5.0f64) {
        let cps = vec![ControlPoint::new_3d("a", Vector3::zeros(), 0.01, 0.01)];
        let tris: BTreeMap<_, _> = [tri("a", Vector3::new(x, y, z))].into_iter().collect();
        let t = Similarity::identity();
        let e2 = cp_alignment_errors(&t, &tris, &cps, EvalMode::TwoD)[0].error;
        let e3 = cp_alignment_errors(&t, &tris, &cps, EvalMode::ThreeD)[0].error;
        prop_assert!(e2 <= e3);
    }
}
