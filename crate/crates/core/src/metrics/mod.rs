//! Benchmark metrics: piecewise-linear score, recalls, ATE, scale and gravity
//! errors, coverage rule and multi-run aggregation.

use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::alignment::umeyama;
use crate::geometry::Similarity;
use crate::trajectory::Trajectory;
use crate::{Error, Result};

/// `(error m, score)` anchors, increasing in error.
pub const SCORE_ANCHORS: [(f64, f64); 7] =
    [(0.05, 100.0), (0.20, 90.0), (0.50, 75.0), (1.0, 60.0), (2.0, 40.0), (5.0, 20.0), (10.0, 0.0)];

pub const CP_RECALL_TAU_M: f64 = 1.0;
pub const POSE_RECALL_TAU_M: f64 = 5.0;

/// Piecewise-linear score of a single alignment error.
pub fn score(e: f64) -> Result<f64> {
    if e.is_nan() || e < 0.0 {
        return Err(Error::InvalidInput(format!("score of invalid error {e}")));
    }
    let (first, last) = (SCORE_ANCHORS[0], SCORE_ANCHORS[SCORE_ANCHORS.len() - 1]);
    if e <= first.0 {
        return Ok(first.1);
    }
    if e >= last.0 {
        return Ok(last.1);
    }
    let k = SCORE_ANCHORS.partition_point(|a| a.0 <= e);
    let ((e0, s0), (e1, s1)) = (SCORE_ANCHORS[k - 1], SCORE_ANCHORS[k]);
    if e == e0 {
        return Ok(s0);
    }
    Ok(s0 + (s1 - s0) * (e - e0) / (e1 - e0))
}

fn non_empty(errors: &[f64]) -> Result<()> {
    if errors.is_empty() {
        Err(Error::InvalidInput("no control points defined for sequence".into()))
    } else {
        Ok(())
    }
}

/// Mean score over all control points; untriangulated ones carry ∞ and score 0.
pub fn sequence_score(errors: &[f64]) -> Result<f64> {
    non_empty(errors)?;
    let mut total = 0.0;
    for &e in errors {
        total += score(e)?;
    }
    Ok(total / errors.len() as f64)
}

/// Percentage of control points with error at most `tau`.
pub fn cp_recall(errors: &[f64], tau: f64) -> Result<f64> {
    non_empty(errors)?;
    Ok(100.0 * errors.iter().filter(|&&e| e <= tau).count() as f64 / errors.len() as f64)
}

/// Index pairs `(estimate, reference)` matched by nearest timestamp.
pub fn associate(estimate: &Trajectory, reference: &Trajectory, tol_ns: i64) -> Vec<(usize, usize)> {
    reference
        .poses
        .iter()
        .enumerate()
        .filter_map(|(j, r)| estimate.nearest(r.timestamp_ns, tol_ns).map(|i| (i, j)))
        .collect()
}

/// Percentage of reference poses with a matched estimate whose horizontal
/// distance is at most `tau`. Unmatched reference poses count as misses.
pub fn pose_recall(estimate: &Trajectory, reference: &Trajectory, tau: f64, tol_ns: i64) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidInput("empty reference trajectory".into()));
    }
    let hits = associate(estimate, reference, tol_ns)
        .into_iter()
        .filter(|&(i, j)| {
            let d = estimate.poses[i].pose.translation - reference.poses[j].pose.translation;
            d.xy().norm() <= tau
        })
        .count();
    Ok(100.0 * hits as f64 / reference.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AteAlignment {
    Sim3,
    Se3,
    /// Estimate is already expressed in the reference frame.
    None,
}

impl AteAlignment {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "sim3" => Some(Self::Sim3),
            "se3" => Some(Self::Se3),
            "none" => Some(Self::None),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sim3 => "sim3",
            Self::Se3 => "se3",
            Self::None => "none",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ate {
    pub rmse: f64,
    pub transform: Similarity,
    pub pairs: usize,
}

/// Absolute trajectory error after closed-form alignment of the estimate.
pub fn ate(estimate: &Trajectory, reference: &Trajectory, alignment: AteAlignment, tol_ns: i64) -> Result<Ate> {
    let pairs = associate(estimate, reference, tol_ns);
    if pairs.len() < 3 {
        return Err(Error::InvalidInput(format!("{} associated poses, need at least 3", pairs.len())));
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| estimate.poses[i].pose.translation).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| reference.poses[j].pose.translation).collect();
    let transform = match alignment {
        AteAlignment::None => Similarity::identity(),
        a => umeyama(&src, &dst, a == AteAlignment::Sim3)?,
    };
    let sq: f64 = src.iter().zip(&dst).map(|(a, b)| (transform.apply(a) - b).norm_squared()).sum();
    Ok(Ate { rmse: (sq / pairs.len() as f64).sqrt(), transform, pairs: pairs.len() })
}

pub fn ate_rmse(estimate: &Trajectory, reference: &Trajectory, alignment: AteAlignment, tol_ns: i64) -> Result<f64> {
    ate(estimate, reference, alignment, tol_ns).map(|a| a.rmse)
}

/// `100·|s − 1|`, percent.
pub fn scale_error(t: &Similarity) -> f64 {
    100.0 * (t.scale - 1.0).abs()
}

/// Angle between the transformed local vertical and the world vertical, degrees.
pub fn gravity_error(t: &Similarity) -> f64 {
    let up = t.rotation.rotate(&Vector3::z());
    up.dot(&Vector3::z()).clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coverage {
    Valid,
    Failure,
}

impl Coverage {
    pub fn name(&self) -> &'static str {
        match self {
            Coverage::Valid => "valid",
            Coverage::Failure => "failure",
        }
    }
}

/// A trajectory spanning less than half the sequence duration is a failure.
pub fn coverage_check(trajectory: &Trajectory, sequence_duration_s: f64) -> Coverage {
    if trajectory.is_empty() || trajectory.span_s() < 0.5 * sequence_duration_s {
        Coverage::Failure
    } else {
        Coverage::Valid
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub sequences: usize,
    pub runs: usize,
    /// With one sequence the between-sequence term is undefined and dropped.
    pub single_sequence: bool,
}

/// Mean of per-sequence run averages and its standard deviation estimate
/// `sqrt(Σᵢⱼ (xᵢⱼ − x̄ᵢ)² / (k(k−1)·n(n−1)))`, with `n(n−1)` replaced by `n`
/// when only one sequence is present.
pub fn group_stats(runs: &[Vec<f64>]) -> Result<GroupStats> {
    let n = runs.len();
    if n == 0 {
        return Err(Error::InvalidInput("no sequences".into()));
    }
    let k = runs[0].len();
    if runs.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidInput("sequences have different run counts".into()));
    }
    if k < 2 {
        return Err(Error::InvalidInput(format!("{k} runs per sequence, need at least 2")));
    }
    let means: Vec<f64> = runs.iter().map(|r| r.iter().sum::<f64>() / k as f64).collect();
    let ss: f64 = runs.iter().zip(&means).map(|(r, m)| r.iter().map(|x| (x - m).powi(2)).sum::<f64>()).sum();
    let (kf, nf) = (k as f64, n as f64);
    let divisor = if n == 1 { kf * (kf - 1.0) * nf } else { kf * (kf - 1.0) * nf * (nf - 1.0) };
    Ok(GroupStats {
        mean: means.iter().sum::<f64>() / nf,
        std: (ss / divisor).sqrt(),
        sequences: n,
        runs: k,
        single_sequence: n == 1,
    })
}

/// Evaluation outcome of one run on one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceResult {
    pub sequence: String,
    pub group: String,
    pub run: usize,
    pub score: f64,
    pub cp_recall: f64,
    pub pose_recall: Option<f64>,
    pub coverage: Coverage,
}

fn fmt_stats(values: &[Vec<f64>]) -> (String, String) {
    match group_stats(values) {
        Ok(s) => (format!("{:.2}", s.mean), format!("{:.2}", s.std)),
        Err(_) => {
            let flat: Vec<f64> = values.iter().flatten().copied().collect();
            (format!("{:.2}", flat.iter().sum::<f64>() / flat.len().max(1) as f64), String::new())
        }
    }
}

/// Per-group table with score, CP recall and pose recall (mean and spread
/// over repeated runs).
pub fn benchmark_table(results: &[SequenceResult]) -> String {
    let mut out = String::from("group,sequences,runs,score,score_std,cp_recall_1m,cp_recall_std,pose_recall_5m,pose_recall_std\n");
    let mut groups: Vec<&str> = results.iter().map(|r| r.group.as_str()).collect();
    groups.sort();
    groups.dedup();
    for g in groups {
        let mut seqs: Vec<&str> = results.iter().filter(|r| r.group == g).map(|r| r.sequence.as_str()).collect();
        seqs.sort();
        seqs.dedup();
        let per_seq = |f: &dyn Fn(&SequenceResult) -> Option<f64>| -> Vec<Vec<f64>> {
            seqs.iter()
                .map(|s| {
                    let mut rs: Vec<&SequenceResult> = results.iter().filter(|r| r.group == g && r.sequence == *s).collect();
                    rs.sort_by_key(|r| r.run);
                    rs.iter().filter_map(|r| f(r)).collect()
                })
                .filter(|v: &Vec<f64>| !v.is_empty())
                .collect()
        };
        let scores = per_seq(&|r| Some(r.score));
        let runs = scores.iter().map(Vec::len).max().unwrap_or(0);
        let (s, s_std) = fmt_stats(&scores);
        let (c, c_std) = fmt_stats(&per_seq(&|r| Some(r.cp_recall)));
        let poses = per_seq(&|r| r.pose_recall);
        let (p, p_std) = if poses.is_empty() { (String::new(), String::new()) } else { fmt_stats(&poses) };
        let _ = writeln!(out, "{g},{},{runs},{s},{s_std},{c},{c_std},{p},{p_std}", seqs.len());
    }
    out
}

#[cfg(test)]
mod tests;
