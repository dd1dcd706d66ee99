//! Ground-truth quality checks: leave-one-out cross-validation of control
//! points and Gaussianity of whitened residuals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix2, Matrix3};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::alignment::{align, propagate_covariance, AlignmentConfig, ControlPoint, CpDim, EvalMode};
use crate::geometry::RigCalibration;
use crate::trajectory::Trajectory;
use crate::triangulation::{Observation, TriangulatedCp};
use crate::{Error, Result};

pub const MIN_RESIDUAL_SAMPLES: usize = 30;
pub const MIN_LOOCV_CPS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum LoocvStatus {
    Ok,
    /// The control point has no triangulation.
    Untriangulated,
    /// The alignment without this control point failed.
    Degenerate(String),
}

impl LoocvStatus {
    pub fn name(&self) -> &'static str {
        match self {
            LoocvStatus::Ok => "ok",
            LoocvStatus::Untriangulated => "untriangulated",
            LoocvStatus::Degenerate(_) => "degenerate",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoocvRecord {
    pub cp_id: String,
    pub dim: CpDim,
    pub status: LoocvStatus,
    pub error_2d: f64,
    /// Only for 3D control points.
    pub error_3d: Option<f64>,
    pub uncertainty_2d: f64,
    pub uncertainty_3d: Option<f64>,
}

impl LoocvRecord {
    fn flagged(cp: &ControlPoint, status: LoocvStatus) -> Self {
        Self { cp_id: cp.id.clone(), dim: cp.dim, status, error_2d: f64::NAN, error_3d: None, uncertainty_2d: f64::NAN, uncertainty_3d: None }
    }

    /// Error over uncertainty in the given evaluation mode; 2D control points
    /// always use their horizontal values.
    pub fn ratio(&self, mode: EvalMode) -> Option<f64> {
        if self.status != LoocvStatus::Ok {
            return None;
        }
        match (mode, self.error_3d, self.uncertainty_3d) {
            (EvalMode::ThreeD, Some(e), Some(u)) => Some(e / u),
            _ => Some(self.error_2d / self.uncertainty_2d),
        }
    }
}

fn spectral_sqrt(m: DMatrix<f64>) -> f64 {
    m.symmetric_eigenvalues().amax().sqrt()
}

/// Holds out each control point in turn, re-runs the joint alignment on the
/// rest, and compares the held-out error to `Σ = s²RΣ_triRᵀ + Σ̂`.
pub fn loocv(
    triangulations: &BTreeMap<String, TriangulatedCp>,
    observations: &BTreeMap<String, Vec<Observation>>,
    poses: &Trajectory,
    rig: &RigCalibration,
    cps: &[ControlPoint],
    config: &AlignmentConfig,
) -> Result<Vec<LoocvRecord>> {
    let usable = cps.iter().filter(|c| triangulations.contains_key(&c.id)).count();
    if usable < MIN_LOOCV_CPS {
        return Err(Error::InsufficientObservations { needed: MIN_LOOCV_CPS, got: usable });
    }
    Ok(cps
        .par_iter()
        .enumerate()
        .map(|(n, cp)| {
            let Some(tri) = triangulations.get(&cp.id) else {
                return LoocvRecord::flagged(cp, LoocvStatus::Untriangulated);
            };
            let rest: Vec<ControlPoint> = cps.iter().enumerate().filter(|&(i, _)| i != n).map(|(_, c)| c.clone()).collect();
            let t = match align(triangulations, observations, poses, rig, &rest, config) {
                Ok(a) => a.transform,
                Err(e) => return LoocvRecord::flagged(cp, LoocvStatus::Degenerate(e.to_string())),
            };
            let d = t.apply(&tri.position) - cp.position;
            let sigma: Matrix3<f64> = propagate_covariance(&tri.covariance, &t) + cp.covariance;
            let horizontal: Matrix2<f64> = sigma.fixed_view::<2, 2>(0, 0).into_owned();
            let three = cp.dim == CpDim::Three;
            LoocvRecord {
                cp_id: cp.id.clone(),
                dim: cp.dim,
                status: LoocvStatus::Ok,
                error_2d: d.xy().norm(),
                error_3d: three.then(|| d.norm()),
                uncertainty_2d: spectral_sqrt(DMatrix::from_column_slice(2, 2, horizontal.as_slice())),
                uncertainty_3d: three.then(|| spectral_sqrt(DMatrix::from_column_slice(3, 3, sigma.as_slice()))),
            }
        })
        .collect())
}

/// Median of the finite error/uncertainty ratios.
pub fn median_ratio(records: &[LoocvRecord], mode: EvalMode) -> Option<f64> {
    let mut r: Vec<f64> = records.iter().filter_map(|x| x.ratio(mode)).filter(|x| x.is_finite()).collect();
    if r.is_empty() {
        return None;
    }
    r.sort_by(f64::total_cmp);
    let n = r.len();
    Some(if n % 2 == 1 { r[n / 2] } else { 0.5 * (r[n / 2 - 1] + r[n / 2]) })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

pub fn loocv_report_csv(records: &[LoocvRecord], mode: EvalMode) -> String {
    let mut out = String::from("id,dim,status,error_2d,error_3d,uncertainty_2d,uncertainty_3d,ratio\n");
    for r in records {
        let ok = r.status == LoocvStatus::Ok;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.cp_id,
            r.dim.count(),
            r.status.name(),
            opt(ok.then_some(r.error_2d)),
            opt(r.error_3d),
            opt(ok.then_some(r.uncertainty_2d)),
            opt(r.uncertainty_3d),
            opt(r.ratio(mode)),
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStats {
    pub count: usize,
    pub mean: f64,
    /// Bessel-corrected standard deviation.
    pub std: f64,
    pub max_abs: f64,
    /// Kolmogorov-Smirnov distance to the unit normal.
    pub ks_distance: f64,
}

pub fn residual_stats(samples: &[f64]) -> Result<ResidualStats> {
    let n = samples.len();
    if n < MIN_RESIDUAL_SAMPLES {
        return Err(Error::InsufficientObservations { needed: MIN_RESIDUAL_SAMPLES, got: n });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite residual sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let normal = Normal::standard();
    let ks_distance = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    Ok(ResidualStats {
        count: n,
        mean,
        std: var.sqrt(),
        max_abs: sorted[0].abs().max(sorted[n - 1].abs()),
        ks_distance,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

/// Equal-width histogram over `[lo, hi)`; the last bin also includes `hi`.
pub fn histogram(samples: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
    if bins == 0 || !(hi > lo) {
        return Err(Error::InvalidInput(format!("invalid histogram range [{lo}, {hi}] with {bins} bins")));
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut h = Histogram { edges, counts: vec![0; bins], underflow: 0, overflow: 0 };
    for &x in samples {
        if x < lo {
            h.underflow += 1;
        } else if x > hi || x.is_nan() {
            h.overflow += 1;
        } else {
            h.counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    Ok(h)
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        out
    }
}
