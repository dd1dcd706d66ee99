use proptest::prelude::*;

use super::*;
use crate::synth::{default_rig, gen_detections, gen_imu_for, gen_world, SynthConfig};

fn fixture() -> (crate::synth::SynthWorld, crate::synth::SynthDetections, SynthConfig) {
    let config = SynthConfig { duration_s: 5.0, landmark_count: 40, detection_sigma_px: 0.7, ..SynthConfig::figure8(3) };
    let world = gen_world(&config).unwrap();
    let det = gen_detections(&world, &config);
    (world, det, config)
}

fn line_of_error(e: Error) -> usize {
    match e {
        Error::Parse { line, .. } => line,
        other => panic!("{other:?}"),
    }
}

#[test]
fn canonical_files_round_trip() {
    let (world, det, config) = fixture();
    let traj = write_trajectory(&world.trajectory);
    let parsed = parse_trajectory(&traj, "t").unwrap();
    assert_eq!(write_trajectory(&parsed), traj);
    assert_eq!(parsed, world.trajectory);

    let cps = write_control_points(&world.control_points);
    let parsed_cps = parse_control_points(&cps, "c").unwrap();
    assert_eq!(write_control_points(&parsed_cps), cps);
    assert_eq!(parsed_cps.iter().map(|c| (&c.id, c.dim)).collect::<Vec<_>>(), world.control_points.iter().map(|c| (&c.id, c.dim)).collect::<Vec<_>>());

    let dets = write_detections(&det.cp_observations);
    let parsed_det = parse_detections(&dets, "d", Some(&parsed_cps), Some(&config.rig)).unwrap();
    assert_eq!(write_detections(&parsed_det), dets);

    let imu = gen_imu_for(&world, &config);
    let text = write_imu(&imu);
    assert_eq!(parse_imu(&text, "i").unwrap(), imu);

    let tracks = write_tracks(&det.tracks);
    assert_eq!(write_tracks(&parse_tracks(&tracks, "k", Some(&config.rig)).unwrap()), tracks);

    let calib = write_calibration(&config.rig);
    let rig = parse_calibration(&calib, "r").unwrap();
    assert_eq!(rig, config.rig);
    assert_eq!(write_calibration(&rig), calib);
}

#[test]
fn trajectory_errors_name_the_line() {
    let text = "# header\n0 0 0 0 0 0 0 1\n1 0 0 0 0 0 1\n";
    assert_eq!(line_of_error(parse_trajectory(text, "t").unwrap_err()), 3);
    let text = "5 0 0 0 0 0 0 1\n5 0 0 0 0 0 0 1\n";
    assert_eq!(line_of_error(parse_trajectory(text, "t").unwrap_err()), 2);
    let text = "0 0 0 nan 0 0 0 1\n";
    assert_eq!(line_of_error(parse_trajectory(text, "t").unwrap_err()), 1);
    let e = parse_trajectory("\n\nx 0 0 0 0 0 0 1\n", "traj.txt").unwrap_err();
    assert!(e.to_string().starts_with("parse-error: traj.txt:3:"), "{e}");
}

#[test]
fn off_unit_quaternion_is_renormalized() {
    let t = parse_trajectory("0 1 2 3 0 0 0 0.9 # comment\n", "t").unwrap();
    assert_eq!(t.poses[0].pose.rotation.wxyz(), [1.0, 0.0, 0.0, 0.0]);
    assert!(parse_trajectory("0 1 2 3 0 0 0 0\n", "t").is_err());
}

#[test]
fn control_point_rules() {
    let ok = "id,dim,x,y,z,sigma_xy,sigma_z\na,3,1,2,3,0.01,0.02\nb,2,4,5,,0.01,\n";
    let cps = parse_control_points(ok, "c").unwrap();
    assert_eq!(cps[1].dim, CpDim::Two);
    assert_eq!(cps[0].position, Vector3::new(1.0, 2.0, 3.0));
    for (bad, line) in [
        ("id,dim,x,y,z,sigma_xy,sigma_z\na,3,1,2,3,0.01,0.02\na,3,1,2,3,0.01,0.02\n", 3),
        ("id,dim,x,y,z,sigma_xy,sigma_z\na,2,1,2,3,0.01,\n", 2),
        ("id,dim,x,y,z,sigma_xy,sigma_z\na,4,1,2,3,0.01,0.02\n", 2),
        ("id,dim,x,y,z,sigma_xy,sigma_z\na,3,1,2,3,0,0.02\n", 2),
        ("id,dim,x,y,z,sigma_xy,sigma_z\na,3,1,2,3,0.01\n", 2),
        ("id,dim,x,y,z,sigma\na,3,1,2,3,0.01\n", 1),
    ] {
        assert_eq!(line_of_error(parse_control_points(bad, "c").unwrap_err()), line, "{bad}");
    }
}

#[test]
fn detection_cross_references() {
    let rig = default_rig();
    let cps = vec![ControlPoint::new_2d("a", 0.0, 0.0, 0.01)];
    let text = "timestamp_ns,camera_id,cp_id,u,v\n0,cam0,a,1,2\n0,cam9,a,1,2\n";
    let e = parse_detections(text, "d", Some(&cps), Some(&rig)).unwrap_err();
    assert_eq!(line_of_error(e.clone()), 3);
    assert!(e.to_string().contains("cam9"));
    let text = "timestamp_ns,camera_id,cp_id,u,v\n0,cam0,zz,1,2\n";
    assert_eq!(line_of_error(parse_detections(text, "d", Some(&cps), Some(&rig)).unwrap_err()), 2);
    let loose = parse_detections(text, "d", None, None).unwrap();
    assert_eq!(loose["zz"][0].pixel, Vector2::new(1.0, 2.0));
}

#[test]
fn imu_and_track_ordering() {
    let text = "timestamp_ns,gx,gy,gz,ax,ay,az\n1,0,0,0,0,0,9.81\n1,0,0,0,0,0,9.81\n";
    assert_eq!(line_of_error(parse_imu(text, "i").unwrap_err()), 3);
    let text = "track_id,timestamp_ns,camera_id,u,v\n1,10,cam0,1,1\n2,5,cam0,1,1\n1,10,cam1,2,2\n1,9,cam0,1,1\n";
    assert_eq!(line_of_error(parse_tracks(text, "k", None).unwrap_err()), 5);
}

#[test]
fn calibration_errors() {
    let good = write_calibration(&default_rig());
    let bad_model = good.replacen("kannala-brandt4", "fisheye9", 1);
    assert!(parse_calibration(&bad_model, "r").unwrap_err().to_string().contains("fisheye9"));
    let typo = good.replacen("gyro_noise_density", "gyro_noise", 1);
    let e = parse_calibration(&typo, "r").unwrap_err();
    assert!(line_of_error(e) >= 1);
}

#[test]
fn covariance_sidecar_parses_fusion_output() {
    let mut c = Matrix6::identity();
    c[(1, 4)] = 0.25;
    c[(4, 1)] = 0.25;
    let text = crate::fusion::covariance_sidecar_csv(&[7], &[c]);
    let parsed = parse_covariance_sidecar(&text, "s").unwrap();
    assert_eq!(parsed, vec![(7, c)]);
}

proptest! {
    #[test]
    fn trajectory_round_trips(rows in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3, prop::array::uniform3(-3.0f64..3.0)), 1..20)) {
        let poses = rows
            .iter()
            .enumerate()
            .map(|(i, (x, y, z, r))| StampedPose {
                timestamp_ns: 1_000 * i as i64,
                pose: RigidPose::new(Rotation::exp(&Vector3::from(*r)), Vector3::new(*x, *y, *z)),
            })
            .collect();
        let traj = Trajectory::new(poses);
        let text = write_trajectory(&traj);
        prop_assert_eq!(write_trajectory(&parse_trajectory(&text, "t").unwrap()), text);
    }
}
