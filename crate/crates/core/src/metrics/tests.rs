use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{RigidPose, Rotation};
use crate::trajectory::{StampedPose, DEFAULT_ASSOC_TOL_NS};

#[test]
fn score_anchors_are_exact() {
    for (e, s) in SCORE_ANCHORS {
        assert_eq!(score(e).unwrap(), s);
    }
    assert_eq!(score(0.03).unwrap(), 100.0);
    assert_eq!(score(0.0).unwrap(), 100.0);
    assert_eq!(score(25.0).unwrap(), 0.0);
    assert_eq!(score(f64::INFINITY).unwrap(), 0.0);
    assert!((score(0.35).unwrap() - 82.5).abs() < 1e-12);
    assert!(score(-0.1).is_err());
}

#[test]
fn score_is_continuous_at_anchors() {
    for (e, s) in SCORE_ANCHORS {
        assert!((score(e - 1e-9).unwrap() - s).abs() < 1e-6);
        assert!((score(e + 1e-9).unwrap() - s).abs() < 1e-6);
    }
}

#[test]
fn sequence_score_and_recall_examples() {
    assert_eq!(sequence_score(&[0.0, 0.0]).unwrap(), 100.0);
    assert_eq!(sequence_score(&[0.2, 0.2]).unwrap(), 90.0);
    assert_eq!(sequence_score(&[0.05, f64::INFINITY]).unwrap(), 50.0);
    assert!(sequence_score(&[]).is_err());
    assert_eq!(cp_recall(&[0.0, 0.0], 1.0).unwrap(), 100.0);
    assert_eq!(cp_recall(&[0.5, 1.5], 1.0).unwrap(), 50.0);
    assert_eq!(cp_recall(&[f64::INFINITY; 2], 1.0).unwrap(), 0.0);
    assert!(cp_recall(&[], 1.0).is_err());
}

fn line(n: usize) -> Trajectory {
    Trajectory::new(
        (0..n)
            .map(|i| StampedPose {
                timestamp_ns: i as i64 * 50_000_000,
                pose: RigidPose::new(Rotation::exp(&Vector3::new(0.0, 0.0, 0.01 * i as f64)), Vector3::new(i as f64, 0.3 * (i as f64).sin(), 0.1 * i as f64)),
            })
            .collect(),
    )
}

#[test]
fn pose_recall_examples() {
    let gt = line(20);
    assert_eq!(pose_recall(&gt, &gt, 5.0, DEFAULT_ASSOC_TOL_NS).unwrap(), 100.0);
    let half = Trajectory::new(gt.poses[..10].to_vec());
    assert_eq!(pose_recall(&half, &gt, 5.0, DEFAULT_ASSOC_TOL_NS).unwrap(), 50.0);
    let shifted = gt.transformed(&Similarity::new(1.0, Rotation::identity(), Vector3::new(6.0, 0.0, 0.0)));
    assert_eq!(pose_recall(&shifted, &gt, 5.0, DEFAULT_ASSOC_TOL_NS).unwrap(), 0.0);
    let lifted = gt.transformed(&Similarity::new(1.0, Rotation::identity(), Vector3::new(0.0, 0.0, 6.0)));
    assert_eq!(pose_recall(&lifted, &gt, 5.0, DEFAULT_ASSOC_TOL_NS).unwrap(), 100.0);
    assert!(pose_recall(&gt, &Trajectory::default(), 5.0, DEFAULT_ASSOC_TOL_NS).is_err());
}

#[test]
fn ate_examples() {
    let gt = line(30);
    assert!(ate_rmse(&gt, &gt, AteAlignment::Sim3, DEFAULT_ASSOC_TOL_NS).unwrap() < 1e-9);
    assert_eq!(ate_rmse(&gt, &gt, AteAlignment::None, DEFAULT_ASSOC_TOL_NS).unwrap(), 0.0);
    let g = Similarity::new(2.3, Rotation::exp(&Vector3::new(0.3, -0.5, 1.2)), Vector3::new(10.0, -3.0, 2.0));
    assert!(ate_rmse(&gt.transformed(&g), &gt, AteAlignment::Sim3, DEFAULT_ASSOC_TOL_NS).unwrap() < 1e-9);
    let rigid = Similarity::new(1.0, g.rotation, g.translation);
    assert!(ate_rmse(&gt.transformed(&rigid), &gt, AteAlignment::Se3, DEFAULT_ASSOC_TOL_NS).unwrap() < 1e-9);
    assert!(ate_rmse(&gt.transformed(&g), &gt, AteAlignment::Se3, DEFAULT_ASSOC_TOL_NS).unwrap() > 1.0);
    assert!(ate_rmse(&Trajectory::new(gt.poses[..2].to_vec()), &gt, AteAlignment::Sim3, DEFAULT_ASSOC_TOL_NS).is_err());
}

#[test]
fn ate_single_offset_without_refit() {
    let n = 12;
    let gt = Trajectory::new(
        (0..n)
            .map(|i| StampedPose {
                timestamp_ns: i * 1_000_000_000,
                pose: RigidPose::new(Rotation::identity(), Vector3::new(i as f64, 0.0, 0.0)),
            })
            .collect(),
    );
    let mut est = gt.clone();
    est.poses[3].pose.translation.y += 1.0;
    let rmse = ate_rmse(&est, &gt, AteAlignment::None, DEFAULT_ASSOC_TOL_NS).unwrap();
    assert!((rmse - (1.0 / n as f64).sqrt()).abs() < 1e-15);
    // A fit absorbs part of the offset.
    assert!(ate_rmse(&est, &gt, AteAlignment::Se3, DEFAULT_ASSOC_TOL_NS).unwrap() < rmse);
}

#[test]
fn scale_and_gravity_errors() {
    assert_eq!(scale_error(&Similarity::identity()), 0.0);
    assert_eq!(gravity_error(&Similarity::identity()), 0.0);
    let s = Similarity::new(1.00222, Rotation::identity(), Vector3::zeros());
    assert!((scale_error(&s) - 0.222).abs() < 1e-9);
    assert_eq!(format!("{:.2}", scale_error(&s)), "0.22");
    let tilted = Similarity::new(1.0, Rotation::exp(&Vector3::new(1f64.to_radians(), 0.0, 0.0)), Vector3::zeros());
    assert!((gravity_error(&tilted) - 1.0).abs() < 1e-9);
    let yawed = Similarity::new(1.0, Rotation::exp(&Vector3::new(0.0, 0.0, 2.0)), Vector3::zeros());
    assert!(gravity_error(&yawed) < 1e-6);
}

#[test]
fn coverage_rule() {
    let t = line(11);
    let span = t.span_s();
    assert_eq!(coverage_check(&t, span), Coverage::Valid);
    assert_eq!(coverage_check(&t, span / 0.4), Coverage::Failure);
    assert_eq!(coverage_check(&t, span * 2.0), Coverage::Valid);
    assert_eq!(coverage_check(&Trajectory::default(), 1.0), Coverage::Failure);
}

#[test]
fn group_stats_examples() {
    let s = group_stats(&[vec![5.0, 5.0, 5.0], vec![7.0, 7.0, 7.0]]).unwrap();
    assert_eq!((s.mean, s.std), (6.0, 0.0));
    let s = group_stats(&[vec![1.0, 2.0, 3.0]]).unwrap();
    assert_eq!(s.mean, 2.0);
    assert!((s.std - (2.0f64 / 6.0).sqrt()).abs() < 1e-12);
    assert!(s.single_sequence);

    // Hand tabulated: sequence means 2 and 11; squared deviations
    // (1+0+1) + (4+1+1) = 8; divisor 6·2·1 = 12.
    let s = group_stats(&[vec![1.0, 2.0, 3.0], vec![9.0, 12.0, 12.0]]).unwrap();
    assert_eq!(s.mean, 6.5);
    assert!((s.std - (8.0f64 / 12.0).sqrt()).abs() < 1e-12);
    assert!(group_stats(&[vec![1.0]]).is_err());
    assert!(group_stats(&[]).is_err());
}

#[test]
fn benchmark_table_groups_runs() {
    let mk = |group: &str, sequence: &str, run, score| SequenceResult {
        sequence: sequence.into(),
        group: group.into(),
        run,
        score,
        cp_recall: 100.0,
        pose_recall: None,
        coverage: Coverage::Valid,
    };
    let rows = vec![mk("b", "s1", 0, 80.0), mk("a", "s1", 1, 3.0), mk("a", "s1", 0, 1.0), mk("a", "s1", 2, 2.0), mk("b", "s1", 1, 80.0)];
    let table = benchmark_table(&rows);
    let lines: Vec<_> = table.lines().collect();
    assert_eq!(lines[1], "a,1,3,2.00,0.58,100.00,0.00,,");
    assert_eq!(lines[2], "b,1,2,80.00,0.00,100.00,0.00,,");
}

proptest! {
    #[test]
    fn score_is_monotone(a in 0.0..20.0f64, b in 0.0..20.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(score(lo).unwrap() >= score(hi).unwrap());
        prop_assert!((0.0..=100.0).contains(&score(a).unwrap()));
    }

    #[test]
    fn aggregates_are_permutation_invariant(mut v in prop::collection::vec(0.0..12.0f64, 1..20), seed in 0u64..1000) {
        let s0 = sequence_score(&v).unwrap();
        let r0 = cp_recall(&v, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..v.len()).rev() {
            v.swap(i, rng.random_range(0..=i));
        }
        prop_assert!((sequence_score(&v).unwrap() - s0).abs() < 1e-9);
        prop_assert_eq!(cp_recall(&v, 1.0).unwrap(), r0);
    }

    #[test]
    fn recall_is_monotone_in_tau(v in prop::collection::vec(0.0..12.0f64, 1..20), t1 in 0.0..10.0f64, t2 in 0.0..10.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(cp_recall(&v, lo).unwrap() <= cp_recall(&v, hi).unwrap());
    }

    #[test]
    fn sim3_ate_is_invariant_to_pre_transform(s in 0.2..5.0f64, rx in -2.0..2.0f64, ry in -2.0..2.0f64, tz in -10.0..10.0f64) {
        let gt = line(15);
        let mut est = gt.clone();
        est.poses[4].pose.translation.y += 0.4;
        let base = ate_rmse(&est, &gt, AteAlignment::Sim3, DEFAULT_ASSOC_TOL_NS).unwrap();
        let g = Similarity::new(s, Rotation::exp(&Vector3::new(rx, ry, 0.3)), Vector3::new(1.0, 2.0, tz));
        let moved = ate_rmse(&est.transformed(&g), &gt, AteAlignment::Sim3, DEFAULT_ASSOC_TOL_NS).unwrap();
        prop_assert!((moved - base).abs() < 1e-9);
    }
}
