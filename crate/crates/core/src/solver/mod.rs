//! Sparse nonlinear least squares over manifolds.
//!
//! Residuals are whitened with the symmetric inverse square root of their
//! measurement covariance, optionally robustified, and minimized with
//! Levenberg-Marquardt on a sparse Cholesky factorization of the normal
//! equations. Blocks flagged `eliminate_first` are ordered ahead of the rest,
//! which makes the factorization a Schur elimination of those blocks.

mod covariance;
mod linear;
mod lm;
pub mod manifold;
mod problem;
pub mod residuals;

pub use covariance::{marginal_covariance, CovarianceEstimator};
pub use lm::{report_at_current, solve, GroupResiduals, IterationRecord, SolveOptions, SolveReport, Termination};
pub use manifold::Manifold;
pub use problem::{
    inverse_sqrt, BlockId, Evaluation, Group, ParameterBlock, Problem, Residual, ResidualBlock, ResidualId, RobustLoss,
};

use crate::{Error, Result};

/// `σ̂₀² = Σ r'ᵀr' / redundancy` for one residual group.
pub fn variance_factor(report: &SolveReport, group: Group) -> Result<f64> {
    let g = report
        .groups
        .get(&group)
        .ok_or_else(|| Error::UnknownGroup(group.name().to_string()))?;
    if g.redundancy <= 0 {
        return Err(Error::InsufficientRedundancy {
            group: group.name().to_string(),
            redundancy: g.redundancy,
        });
    }
    Ok(g.whitened.iter().map(|r| r * r).sum::<f64>() / g.redundancy as f64)
}

/// Finite-difference check of a residual's analytic Jacobians. Returns the
/// largest relative deviation over all blocks and tangent directions.
pub fn check_jacobians(function: &dyn Residual, manifolds: &[Manifold], params: &[Vec<f64>], step: f64) -> f64 {
    let refs: Vec<&[f64]> = params.iter().map(|v| v.as_slice()).collect();
    let eval = function.evaluate(&refs, true);
    let Some(analytic) = eval.jacobians else { return 0.0 };
    let mut worst: f64 = 0.0;
    for (slot, m) in manifolds.iter().enumerate() {
        for k in 0..m.tangent_dim() {
            let mut d = vec![0.0; m.tangent_dim()];
            d[k] = step;
            let mut plus = params.to_vec();
            plus[slot] = m.plus(&params[slot], &d);
            d[k] = -step;
            let mut minus = params.to_vec();
            minus[slot] = m.plus(&params[slot], &d);
            let rp = function.evaluate(&plus.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), false).residual;
            let rm = function.evaluate(&minus.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), false).residual;
            let num = (rp - rm) / (2.0 * step);
            let col = analytic[slot].column(k);
            let scale = col.norm().max(num.norm()).max(1.0);
            worst = worst.max((num - col).norm() / scale);
        }
    }
    worst
}
