//! End-to-end evaluation of a trajectory against surveyed control points.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::alignment::{
    align, cp_alignment_errors, scored_errors, AlignmentConfig, ControlPoint, CpDim, CpError, EvalMode, SparseAlignment,
};
use crate::geometry::RigCalibration;
use crate::metrics::{self, Coverage};
use crate::trajectory::Trajectory;
use crate::triangulation::{triangulate_cp, Observation, TriangulatedCp, TriangulationConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluateConfig {
    pub mode: EvalMode,
    pub triangulation: TriangulationConfig,
    pub alignment: AlignmentConfig,
    /// Length of the recording; defaults to the span of the detections.
    pub sequence_duration_s: Option<f64>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::TwoD,
            triangulation: TriangulationConfig::default(),
            alignment: AlignmentConfig::default(),
            sequence_duration_s: None,
        }
    }
}

impl EvaluateConfig {
    /// `key=value` lines describing every setting that affects the result.
    pub fn echo(&self) -> Vec<(&'static str, String)> {
        let t = &self.triangulation;
        let a = &self.alignment;
        vec![
            ("mode", self.mode.name().to_string()),
            ("threshold_px", format!("{}", t.threshold_px)),
            ("ransac_iters", t.max_iters.to_string()),
            ("seed", t.seed.to_string()),
            ("assoc_tol_ns", t.assoc_tol_ns.to_string()),
            ("huber", format!("{}", a.huber)),
            ("max_solver_iters", a.solve.max_iters.to_string()),
            (
                "sequence_duration_s",
                self.sequence_duration_s.map_or_else(|| "auto".to_string(), |d| format!("{d}")),
            ),
        ]
    }
}

/// Result of one evaluation run.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub mode: EvalMode,
    pub sequence_duration_s: f64,
    pub trajectory_span_s: f64,
    pub coverage: Coverage,
    pub triangulations: BTreeMap<String, TriangulatedCp>,
    /// Control points that could not be triangulated, with the reason.
    pub untriangulated: BTreeMap<String, String>,
    pub alignment: Option<SparseAlignment>,
    pub errors: Vec<CpError>,
    pub score: f64,
    pub cp_recall: f64,
    /// Percent; NaN when no alignment was computed.
    pub scale_error: f64,
    /// Degrees; NaN when no alignment was computed.
    pub gravity_error: f64,
}

/// Time span covered by the detections, in seconds.
pub fn detection_span_s(observations: &BTreeMap<String, Vec<Observation>>) -> f64 {
    let ts = observations.values().flatten().map(|o| o.timestamp_ns);
    let (lo, hi) = ts.fold((i64::MAX, i64::MIN), |(lo, hi), t| (lo.min(t), hi.max(t)));
    if lo > hi {
        0.0
    } else {
        (hi - lo) as f64 * 1e-9
    }
}

/// Triangulates every control point that has observations, in parallel.
/// Failures are returned by id with their reason.
pub fn triangulate_all(
    observations: &BTreeMap<String, Vec<Observation>>,
    poses: &Trajectory,
    rig: &RigCalibration,
    config: &TriangulationConfig,
) -> (BTreeMap<String, TriangulatedCp>, BTreeMap<String, String>) {
    let results: Vec<(String, Result<TriangulatedCp>)> = observations
        .par_iter()
        .map(|(id, obs)| (id.clone(), triangulate_cp(id, obs, poses, rig, config)))
        .collect();
    let mut ok = BTreeMap::new();
    let mut failed = BTreeMap::new();
    for (id, r) in results {
        match r {
            Ok(t) => {
                ok.insert(id, t);
            }
            Err(e) => {
                failed.insert(id, e.to_string());
            }
        }
    }
    (ok, failed)
}

fn failed_errors(cps: &[ControlPoint], mode: EvalMode) -> Vec<CpError> {
    cps.iter()
        .map(|cp| {
            let excluded = mode == EvalMode::ThreeD && cp.dim == CpDim::Two;
            CpError { id: cp.id.clone(), error: if excluded { f64::NAN } else { f64::INFINITY }, excluded }
        })
        .collect()
}

/// Triangulate, align, and score. A trajectory failing the coverage rule is
/// not aligned: all of its control points count as misses with score 0.
pub fn evaluate(
    trajectory: &Trajectory,
    observations: &BTreeMap<String, Vec<Observation>>,
    cps: &[ControlPoint],
    rig: &RigCalibration,
    config: &EvaluateConfig,
) -> Result<Evaluation> {
    if cps.is_empty() {
        return Err(Error::InvalidInput("no control points".into()));
    }
    let duration = config.sequence_duration_s.unwrap_or_else(|| detection_span_s(observations));
    let coverage = metrics::coverage_check(trajectory, duration);
    let span = if trajectory.is_empty() { 0.0 } else { trajectory.span_s() };
    let (triangulations, mut untriangulated) = triangulate_all(observations, trajectory, rig, &config.triangulation);
    for cp in cps {
        if !observations.contains_key(&cp.id) {
            untriangulated.insert(cp.id.clone(), "no detections".into());
        }
    }

    let (alignment, errors) = match coverage {
        Coverage::Failure => (None, failed_errors(cps, config.mode)),
        Coverage::Valid => {
            let a = align(&triangulations, observations, trajectory, rig, cps, &config.alignment)?;
            let errors = cp_alignment_errors(&a.transform, &triangulations, cps, config.mode);
            (Some(a), errors)
        }
    };
    let scored = scored_errors(&errors);
    if scored.is_empty() {
        return Err(Error::InvalidInput(format!("no control points usable in {} mode", config.mode.name())));
    }
    let (score, cp_recall) = match coverage {
        Coverage::Failure => (0.0, 0.0),
        Coverage::Valid => (metrics::sequence_score(&scored)?, metrics::cp_recall(&scored, metrics::CP_RECALL_TAU_M)?),
    };
    let (scale_error, gravity_error) = alignment
        .as_ref()
        .map_or((f64::NAN, f64::NAN), |a| (metrics::scale_error(&a.transform), metrics::gravity_error(&a.transform)));
    Ok(Evaluation {
        mode: config.mode,
        sequence_duration_s: duration,
        trajectory_span_s: span,
        coverage,
        triangulations,
        untriangulated,
        alignment,
        errors,
        score,
        cp_recall,
        scale_error,
        gravity_error,
    })
}

fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x:.6}")
    }
}

impl Evaluation {
    pub fn max_error(&self) -> f64 {
        scored_errors(&self.errors).into_iter().fold(0.0, f64::max)
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let n = self.errors.iter().filter(|e| !e.excluded).count();
        let _ = writeln!(out, "mode:            {}", self.mode.name());
        let _ = writeln!(out, "validity:        {}", self.coverage.name());
        let _ = writeln!(
            out,
            "coverage:        {:.3} s of {:.3} s",
            self.trajectory_span_s, self.sequence_duration_s
        );
        let _ = writeln!(
            out,
            "control points:  {n} scored, {} triangulated, {} untriangulated",
            self.triangulations.len(),
            self.untriangulated.len()
        );
        let _ = writeln!(out, "score:           {:.3}", self.score);
        let _ = writeln!(out, "CP@1m recall:    {:.3} %", self.cp_recall);
        let _ = writeln!(out, "max CP error:    {} m", fmt_num(self.max_error()));
        let _ = writeln!(out, "scale error:     {} %", fmt_num(self.scale_error));
        let _ = writeln!(out, "gravity error:   {} deg", fmt_num(self.gravity_error));
        out
    }

    /// Comma-separated report: a `key,value` block with the config echo and
    /// summary metrics, followed by per-CP rows.
    pub fn report_csv(&self, config: &EvaluateConfig, cps: &[ControlPoint]) -> String {
        let mut out = String::from("key,value\n");
        for (k, v) in config.echo() {
            let _ = writeln!(out, "config.{k},{v}");
        }
        let _ = writeln!(out, "validity,{}", self.coverage.name());
        let _ = writeln!(out, "sequence_duration_s,{}", fmt_num(self.sequence_duration_s));
        let _ = writeln!(out, "trajectory_span_s,{}", fmt_num(self.trajectory_span_s));
        let _ = writeln!(out, "score,{}", fmt_num(self.score));
        let _ = writeln!(out, "cp_recall_1m,{}", fmt_num(self.cp_recall));
        let _ = writeln!(out, "max_error_m,{}", fmt_num(self.max_error()));
        let _ = writeln!(out, "scale_error_pct,{}", fmt_num(self.scale_error));
        let _ = writeln!(out, "gravity_error_deg,{}", fmt_num(self.gravity_error));
        out.push('\n');
        out.push_str("id,dim,excluded,error_m,score,status\n");
        for (e, cp) in self.errors.iter().zip(cps) {
            let s = if e.excluded || self.coverage == Coverage::Failure {
                if e.excluded { f64::NAN } else { 0.0 }
            } else {
                metrics::score(e.error).unwrap_or(0.0)
            };
            let status = match self.untriangulated.get(&e.id) {
                Some(reason) => reason.split(':').next().unwrap_or("untriangulated").to_string(),
                None => "ok".into(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.id,
                cp.dim.count(),
                u8::from(e.excluded),
                fmt_num(e.error),
                fmt_num(s),
                status
            );
        }
        out
    }
}
