use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cpgt_core::alignment::{align, AlignmentConfig, EvalMode};
use cpgt_core::fusion::{self, FusionConfig, FusionInput, FusionMode};
use cpgt_core::io;
use cpgt_core::metrics::{self, benchmark_table, group_stats, Coverage, SequenceResult};
use cpgt_core::pipeline::{evaluate as run_evaluation, triangulate_all, EvaluateConfig, Evaluation};
use cpgt_core::synth::{self, PerturbModel, SynthConfig};
use cpgt_core::triangulation::TriangulationConfig;
use cpgt_core::validation::{self, loocv as run_loocv, LoocvStatus};
use cpgt_core::{Error, Result};
use log::warn;
use rayon::prelude::*;

use crate::inputs::{self, Sequence};
use crate::{AlignOptions, AteArgs, BenchmarkArgs, EvaluateArgs, FuseArgs, LoocvArgs, SequenceInputs, SynthArgs};

const HISTOGRAM_BINS: usize = 40;
const HISTOGRAM_RANGE: (f64, f64) = (-5.0, 5.0);

fn evaluate_config(a: &AlignOptions, seed: u64, duration_s: Option<f64>) -> EvaluateConfig {
    EvaluateConfig {
        mode: a.mode.into(),
        triangulation: TriangulationConfig { threshold_px: a.threshold, seed, ..Default::default() },
        alignment: AlignmentConfig::default(),
        sequence_duration_s: duration_s,
    }
}

fn check_positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::InvalidInput(format!("{what} must be at least 1")))
    } else {
        Ok(())
    }
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        format!("{x}").to_lowercase()
    }
}

fn run_seeds(seq: &Sequence, a: &AlignOptions, runs: usize, duration_s: Option<f64>) -> Result<Vec<(EvaluateConfig, Evaluation)>> {
    (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let config = evaluate_config(a, a.seed + r, duration_s);
            let ev = run_evaluation(&seq.trajectory, &seq.observations, &seq.cps, &seq.rig, &config)?;
            Ok((config, ev))
        })
        .collect()
}

pub fn evaluate(args: &EvaluateArgs) -> Result<String> {
    check_positive("--runs", args.runs)?;
    let seq = inputs::sequence(&args.inputs)?;
    let results = run_seeds(&seq, &args.align, args.runs, args.duration_s)?;
    let (config, first) = &results[0];
    let mut report = first.report_csv(config, &seq.cps);
    let mut summary = first.summary();
    if args.runs > 1 {
        report.push_str("\nrun,seed,validity,score,cp_recall_1m,max_error_m,scale_error_pct,gravity_error_deg\n");
        for (i, (c, ev)) in results.iter().enumerate() {
            let _ = writeln!(
                report,
                "{i},{},{},{},{},{},{},{}",
                c.triangulation.seed,
                ev.coverage.name(),
                num(ev.score),
                num(ev.cp_recall),
                num(ev.max_error()),
                num(ev.scale_error),
                num(ev.gravity_error)
            );
        }
        report.push_str("\nmetric,mean,std,runs\n");
        let _ = writeln!(summary, "runs:            {}", args.runs);
        for (name, values) in [
            ("score", results.iter().map(|r| r.1.score).collect::<Vec<_>>()),
            ("cp_recall_1m", results.iter().map(|r| r.1.cp_recall).collect()),
        ] {
            let s = group_stats(&[values])?;
            let _ = writeln!(report, "{name},{},{},{}", num(s.mean), num(s.std), s.runs);
            let _ = writeln!(summary, "{name:<16} {:.3} ± {:.3}", s.mean, s.std);
        }
    }
    Ok(match &args.report {
        Some(path) => {
            io::write_text(path, &report)?;
            summary
        }
        None => format!("{summary}\n{report}"),
    })
}

struct ManifestRow {
    sequence: String,
    group: String,
    inputs: SequenceInputs,
    reference: Option<PathBuf>,
}

fn read_manifest(path: &Path, pixel_sigma: f64) -> Result<Vec<ManifestRow>> {
    const HEADER: [&str; 7] = ["sequence", "group", "trajectory", "detections", "control_points", "calibration", "reference"];
    let file = path.display().to_string();
    let base = path.parent().unwrap_or(Path::new("."));
    let text = io::read_text(path)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(text.as_bytes());
    let parse_err = |line: usize, message: String| Error::Parse { file: file.clone(), line, message };
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().ne(HEADER) {
        return Err(parse_err(1, format!("expected header '{}'", HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec[0].is_empty() || rec[1].is_empty() {
            return Err(parse_err(line, "sequence and group must not be empty".into()));
        }
        let p = |s: &str| base.join(s);
        rows.push(ManifestRow {
            sequence: rec[0].to_string(),
            group: rec[1].to_string(),
            inputs: SequenceInputs {
                trajectory: p(&rec[2]),
                detections: p(&rec[3]),
                control_points: p(&rec[4]),
                calibration: p(&rec[5]),
                pixel_sigma,
            },
            reference: (!rec[6].is_empty()).then(|| p(&rec[6])),
        });
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("{file}: manifest lists no sequences")));
    }
    Ok(rows)
}

pub fn benchmark(args: &BenchmarkArgs) -> Result<String> {
    check_positive("--runs", args.runs)?;
    let rows = read_manifest(&args.manifest, args.pixel_sigma)?;
    let loaded: Vec<(Sequence, Option<cpgt_core::trajectory::Trajectory>)> = rows
        .par_iter()
        .map(|r| Ok((inputs::sequence(&r.inputs)?, r.reference.as_deref().map(inputs::trajectory).transpose()?)))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..rows.len()).flat_map(|s| (0..args.runs).map(move |r| (s, r))).collect();
    let results: Vec<SequenceResult> = jobs
        .par_iter()
        .map(|&(s, r)| {
            let (seq, reference) = &loaded[s];
            let config = evaluate_config(&args.align, args.align.seed + r as u64, None);
            let base = SequenceResult {
                sequence: rows[s].sequence.clone(),
                group: rows[s].group.clone(),
                run: r,
                score: 0.0,
                cp_recall: 0.0,
                pose_recall: reference.as_ref().map(|_| 0.0),
                coverage: Coverage::Failure,
            };
            let ev = match run_evaluation(&seq.trajectory, &seq.observations, &seq.cps, &seq.rig, &config) {
                Ok(ev) => ev,
                Err(e) if e.is_degenerate() => {
                    warn!("{} run {r}: {e}; counted as failure", rows[s].sequence);
                    return Ok(base);
                }
                Err(e) => return Err(e),
            };
            let pose_recall = match (reference, &ev.alignment) {
                (Some(reference), Some(a)) => Some(metrics::pose_recall(
                    &seq.trajectory.transformed(&a.transform),
                    reference,
                    metrics::POSE_RECALL_TAU_M,
                    config.triangulation.assoc_tol_ns,
                )?),
                (Some(_), None) => Some(0.0),
                (None, _) => None,
            };
            Ok(SequenceResult { score: ev.score, cp_recall: ev.cp_recall, pose_recall, coverage: ev.coverage, ..base })
        })
        .collect::<Result<_>>()?;
    if let Some(path) = &args.runs_out {
        let mut out = String::from("sequence,group,run,validity,score,cp_recall_1m,pose_recall_5m\n");
        for r in &results {
            let pose = r.pose_recall.map(num).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{pose}",
                r.sequence,
                r.group,
                r.run,
                r.coverage.name(),
                num(r.score),
                num(r.cp_recall)
            );
        }
        io::write_text(path, &out)?;
    }
    Ok(benchmark_table(&results))
}

pub fn fuse(args: &FuseArgs) -> Result<String> {
    let seq = inputs::sequence(&args.inputs)?;
    let imu = inputs::imu(&args.imu)?;
    let tracks = match (&args.tracks, args.inertial_only) {
        (Some(p), _) => inputs::tracks(p, &seq.rig, args.inputs.pixel_sigma)?,
        (None, true) => Vec::new(),
        (None, false) => return Err(Error::InvalidInput("--tracks is required unless --inertial-only is given".into())),
    };
    let config = FusionConfig {
        rounds: args.rounds,
        cp_deflation: args.deflation,
        keyframe_stride: args.stride,
        mode: if args.inertial_only { FusionMode::InertialOnly } else { FusionMode::Full },
        ..Default::default()
    };
    config.validate()?;
    let init = if args.world_frame {
        seq.trajectory.clone()
    } else {
        let tconf = TriangulationConfig::default();
        let (tris, _) = triangulate_all(&seq.observations, &seq.trajectory, &seq.rig, &tconf);
        let a = align(&tris, &seq.observations, &seq.trajectory, &seq.rig, &seq.cps, &AlignmentConfig::default())?;
        seq.trajectory.transformed(&a.transform)
    };
    let input = FusionInput {
        init: &init,
        tracks: &tracks,
        cp_observations: &seq.observations,
        cps: &seq.cps,
        imu: &imu,
        rig: &seq.rig,
    };
    let mut fp = fusion::build_fusion_problem(&input, &config)?;
    let pgt = fusion::optimize_pseudo_gt(&mut fp, &config)?;

    let timestamps: Vec<i64> = pgt.keyframes.iter().map(|k| k.timestamp_ns).collect();
    let sidecar = fusion::covariance_sidecar_csv(&timestamps, &pgt.covariances);
    let mut residuals = String::from("family,count,mean,std,max_abs,ks_distance\n");
    let mut histograms = String::new();
    let mut summary = String::new();
    let _ = writeln!(summary, "mode:            {}", config.mode.name());
    let _ = writeln!(summary, "keyframes:       {}", pgt.keyframes.len());
    let _ = writeln!(
        summary,
        "solver:          {} after {} iterations, cost {:.6e}",
        pgt.report.termination.name(),
        pgt.report.iterations,
        pgt.report.final_cost
    );
    for (round, factors) in pgt.variance_factors.iter().enumerate() {
        let list: Vec<String> = factors.iter().map(|(g, f)| format!("{g}={f:.4}")).collect();
        let _ = writeln!(summary, "round {round}:         {}", list.join(" "));
    }
    let _ = writeln!(summary, "median position uncertainty: {:.6} m", pgt.median_position_uncertainty);
    for (g, w) in &pgt.whitened {
        let Ok(s) = validation::residual_stats(w) else { continue };
        let _ = writeln!(residuals, "{g},{},{},{},{},{}", s.count, num(s.mean), num(s.std), num(s.max_abs), num(s.ks_distance));
        let _ = writeln!(summary, "whitened {g}: std {:.4} over {}", s.std, s.count);
        let h = validation::histogram(w, HISTOGRAM_BINS, HISTOGRAM_RANGE.0, HISTOGRAM_RANGE.1)?;
        let _ = writeln!(histograms, "\n# {g} (underflow {}, overflow {})", h.underflow, h.overflow);
        histograms.push_str(&h.to_csv());
    }
    let cov_path = args.covariance.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".cov.csv");
        PathBuf::from(p)
    });
    io::write_text(&args.out, &io::write_trajectory(&pgt.trajectory))?;
    io::write_text(&cov_path, &sidecar)?;
    if let Some(path) = &args.residuals {
        io::write_text(path, &format!("{residuals}{histograms}"))?;
    }
    Ok(summary)
}

pub fn loocv(args: &LoocvArgs) -> Result<String> {
    let seq = inputs::sequence(&args.inputs)?;
    let config = evaluate_config(&args.align, args.align.seed, None);
    let (tris, _) = triangulate_all(&seq.observations, &seq.trajectory, &seq.rig, &config.triangulation);
    let records = run_loocv(&tris, &seq.observations, &seq.trajectory, &seq.rig, &seq.cps, &config.alignment)?;
    let mode: EvalMode = args.align.mode.into();
    let report = validation::loocv_report_csv(&records, mode);
    let ok = records.iter().filter(|r| r.status == LoocvStatus::Ok).count();
    let mut summary = String::new();
    let _ = writeln!(summary, "control points:  {} ({ok} validated)", records.len());
    let _ = writeln!(
        summary,
        "median ratio:    {}",
        validation::median_ratio(&records, mode).map_or_else(|| "nan".into(), |m| format!("{m:.4}"))
    );
    Ok(match &args.report {
        Some(path) => {
            io::write_text(path, &report)?;
            summary
        }
        None => format!("{summary}\n{report}"),
    })
}

pub fn synth(args: &SynthArgs) -> Result<String> {
    let mut config = SynthConfig::preset(&args.preset, args.seed)
        .ok_or_else(|| Error::InvalidInput(format!("unknown preset '{}' (figure8, spline, platform)", args.preset)))?;
    if let Some(d) = args.duration_s {
        config.duration_s = d;
    }
    if let Some(n) = args.cp_count {
        config.cp_count = n;
    }
    config.detection_sigma_px = args.detection_sigma;
    config.feature_sigma_px = args.feature_sigma;
    config.imu_noise_enabled = args.imu_noise;
    config.cp_measurement_noise = args.cp_noise;
    config.validate()?;
    let world = synth::gen_world(&config)?;
    let det = synth::gen_detections(&world, &config);
    let imu = synth::gen_imu_for(&world, &config);
    let perturb = PerturbModel {
        sigma_pos: args.perturb_pos,
        sigma_rot: args.perturb_rot_deg.to_radians(),
        scale_drift_rate: args.scale_drift,
        dropout: None,
    };
    let estimate = synth::perturb_trajectory(&world.trajectory, &perturb, args.seed);

    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io(format!("{}: {e}", args.out.display())))?;
    let files = [
        ("groundtruth.txt", io::write_trajectory(&world.trajectory)),
        ("trajectory.txt", io::write_trajectory(&estimate)),
        ("control_points.csv", io::write_control_points(&world.control_points)),
        ("detections.csv", io::write_detections(&det.cp_observations)),
        ("imu.csv", io::write_imu(&imu)),
        ("tracks.csv", io::write_tracks(&det.tracks)),
        ("calibration.toml", io::write_calibration(&config.rig)),
    ];
    let mut summary = String::new();
    for (name, text) in &files {
        io::write_text(&args.out.join(name), text)?;
        let _ = writeln!(summary, "{name}: {} lines", text.lines().count());
    }
    if !det.unobserved.is_empty() {
        let _ = writeln!(summary, "unobserved control points: {}", det.unobserved.join(" "));
    }
    Ok(summary)
}

pub fn ate(args: &AteArgs) -> Result<String> {
    if !(args.tol_ms >= 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be non-negative, got {}", args.tol_ms)));
    }
    let estimate = inputs::trajectory(&args.estimate)?;
    let reference = inputs::trajectory(&args.reference)?;
    let alignment = args.align.into();
    let tol_ns = (args.tol_ms * 1e6).round() as i64;
    let a = metrics::ate(&estimate, &reference, alignment, tol_ns)?;
    Ok(format!(
        "alignment,pairs,rmse_m,scale\n{},{},{:.12e},{:.12}\n",
        metrics::AteAlignment::name(&alignment),
        a.pairs,
        a.rmse,
        a.transform.scale
    ))
}
