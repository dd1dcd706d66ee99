use cpgt_wasm::{score, score_curve, sequence_score, simulate_alignment, simulate_residuals};

#[test]
fn curve_passes_through_anchors() {
    let anchors = [(0.05, 100.0), (0.2, 90.0), (0.5, 75.0), (1.0, 60.0), (2.0, 40.0), (5.0, 20.0), (10.0, 0.0)];
    for (e, s) in anchors {
        assert_eq!(score(e), s);
    }
    let curve = score_curve(10.0, 201);
    assert_eq!(curve.len(), 201);
    assert_eq!(curve[0], 100.0);
    assert_eq!(curve[200], 0.0);
    assert!(curve.windows(2).all(|w| w[1] <= w[0]));
    assert!(score(-1.0).is_nan());
    assert!(score_curve(10.0, 1).is_empty());
}

#[test]
fn missing_points_score_zero() {
    assert_eq!(sequence_score(&[0.01, f64::INFINITY]), 50.0);
    assert!(sequence_score(&[]).is_nan());
}

#[test]
fn noiseless_alignment_is_exact() {
    let d = simulate_alignment(3, 10, 0.0, 0.6, -75.0).unwrap();
    assert!((d.scale() - 0.6).abs() < 1e-9);
    assert!((d.yaw_deg() + 75.0).abs() < 1e-7);
    assert!(d.tilt_deg() < 1e-6);
    assert!(d.rmse() < 1e-9);
    assert_eq!(d.score(), 100.0);
    assert_eq!(d.local_xy().len(), 20);
}

#[test]
fn alignment_residual_grows_with_noise() {
    let quiet = simulate_alignment(4, 40, 0.05, 1.0, 10.0).unwrap();
    let loud = simulate_alignment(4, 40, 0.5, 1.0, 10.0).unwrap();
    assert!(loud.rmse() > 5.0 * quiet.rmse());
    // A 7-parameter fit on n points in 3D leaves about sqrt((3n - 7) / n) of the noise.
    let expected = 0.5 * 3f64.sqrt() * ((120.0 - 7.0) / 120.0f64).sqrt();
    assert!((loud.rmse() / expected - 1.0).abs() < 0.25, "{}", loud.rmse());
    assert!(simulate_alignment(4, 2, 0.0, 1.0, 0.0).is_err());
    assert!(simulate_alignment(4, 5, 0.0, -1.0, 0.0).is_err());
}

#[test]
fn residual_histogram_tracks_calibration() {
    let calibrated = simulate_residuals(1, 20_000, 1.0, 1.0, 50, 5.0).unwrap();
    assert!((calibrated.std() - 1.0).abs() < 0.03);
    assert!(calibrated.ks_distance() < 0.02);
    let total: u32 = calibrated.counts().iter().sum::<u32>() + calibrated.outside();
    assert_eq!(total, 20_000);
    let expected: f64 = calibrated.density().iter().sum();
    assert!((expected / 20_000.0 - 1.0).abs() < 1e-6);

    let under = simulate_residuals(1, 20_000, 2.0, 1.0, 50, 5.0).unwrap();
    assert!((under.std() - 2.0).abs() < 0.06);
    assert!(under.ks_distance() > 0.1);
    assert!(simulate_residuals(1, 10, 1.0, 0.0, 10, 5.0).is_err());
}
