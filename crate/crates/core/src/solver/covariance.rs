use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::linear::{assemble, factor, linearize, Layout, Pattern};
use super::problem::{BlockId, Problem};
use crate::{Error, Result};

const DENSE_RANK_CHECK_LIMIT: usize = 3000;
/// Smallest admissible eigenvalue of the unit-diagonal scaled Hessian.
const MIN_SCALED_EIGENVALUE: f64 = 1e-12;
const INVERSE_ITERATIONS: usize = 8;

/// Factorized Gauss-Newton Hessian of a solved problem, for extracting
/// tangent-space marginal covariances of individual blocks.
pub struct CovarianceEstimator {
    layout: Layout,
    block_dims: Vec<usize>,
    pattern: Pattern,
    /// Cholesky factor of `D⁻¹ H D⁻¹` with `D = diag(√H_ii)`.
    l_values: Vec<f64>,
    inv_scale: DVector<f64>,
}

fn null_space_dim(pattern: &Pattern, values: &[f64]) -> usize {
    let n = pattern.size();
    if n > DENSE_RANK_CHECK_LIMIT {
        return 1;
    }
    let mut dense = DMatrix::zeros(n, n);
    for c in 0..n {
        for p in pattern.col_offsets[c]..pattern.col_offsets[c + 1] {
            dense[(pattern.row_indices[p], c)] = values[p];
        }
    }
    let eig = SymmetricEigen::new(dense).eigenvalues;
    let max = eig.amax();
    eig.iter().filter(|&&l| l <= MIN_SCALED_EIGENVALUE * max).count().max(1)
}

impl CovarianceEstimator {
    pub fn new(problem: &Problem) -> Result<Self> {
        if !problem.gauge_fixed() {
            return Err(Error::GaugeNotFixed);
        }
        let layout = Layout::new(problem);
        if layout.size == 0 {
            return Err(Error::EmptyProblem);
        }
        let pattern = Pattern::new(problem, &layout);
        let lin = linearize(problem, &layout, true)?;
        let (mut hess, _) = assemble(problem, &layout, &pattern, &lin);
        let diag: Vec<f64> = pattern.diag_pos.iter().map(|&p| hess[p]).collect();
        if diag.iter().any(|&d| d <= 0.0) {
            return Err(Error::RankDeficient { null_dim: diag.iter().filter(|&&d| d <= 0.0).count() });
        }
        let inv_scale = DVector::from_iterator(diag.len(), diag.iter().map(|d| 1.0 / d.sqrt()));
        for c in 0..pattern.size() {
            for p in pattern.col_offsets[c]..pattern.col_offsets[c + 1] {
                hess[p] *= inv_scale[c] * inv_scale[pattern.row_indices[p]];
            }
        }
        let Some(chol) = factor(&pattern, &hess) else {
            return Err(Error::RankDeficient { null_dim: null_space_dim(&pattern, &hess) });
        };
        // Inverse iteration towards the weakest direction of the scaled Hessian.
        let n = pattern.size();
        let mut x = DVector::from_iterator(n, (0..n).map(|i| 1.0 + 0.5 * ((i * 7919) % 13) as f64));
        let mut growth = 0.0;
        for _ in 0..INVERSE_ITERATIONS {
            x /= x.norm();
            x = chol.solve(&x);
            growth = x.norm();
        }
        if !growth.is_finite() || growth >= 1.0 / MIN_SCALED_EIGENVALUE {
            return Err(Error::RankDeficient { null_dim: null_space_dim(&pattern, &hess) });
        }
        let l_values = chol.into_values();
        let block_dims = problem.params.iter().map(|p| p.manifold.tangent_dim()).collect();
        Ok(Self { layout, block_dims, pattern, l_values, inv_scale })
    }

    /// Marginal covariance of one block in its tangent space.
    pub fn block(&self, id: BlockId) -> Result<DMatrix<f64>> {
        Ok(self.blocks(&[id])?.remove(0))
    }

    pub fn blocks(&self, ids: &[BlockId]) -> Result<Vec<DMatrix<f64>>> {
        let chol = self.pattern.factor_from_values(&self.l_values);
        let mut out = Vec::with_capacity(ids.len());
        // Bound the dense right-hand side to a few hundred columns per solve.
        for chunk in ids.chunks(64) {
            let mut cols = 0;
            let mut spans = Vec::with_capacity(chunk.len());
            for &id in chunk {
                let Some(o) = self.layout.offset.get(id).copied().flatten() else {
                    return Err(Error::InvalidInput(format!("block {id} is constant or unused")));
                };
                let d = self.block_dims[id];
                spans.push((o, d, cols));
                cols += d;
            }
            let mut rhs = DMatrix::zeros(self.layout.size, cols);
            for &(o, d, c) in &spans {
                for k in 0..d {
                    rhs[(o + k, c + k)] = self.inv_scale[o + k];
                }
            }
            chol.solve_mut(&mut rhs);
            for &(o, d, c) in &spans {
                let mut b = rhs.view((o, c), (d, d)).clone_owned();
                for i in 0..d {
                    b.row_mut(i).scale_mut(self.inv_scale[o + i]);
                }
                out.push((&b + b.transpose()) * 0.5);
            }
        }
        Ok(out)
    }
}

/// Tangent-space marginal covariance of `block` at the current solution.
pub fn marginal_covariance(problem: &Problem, block: BlockId) -> Result<DMatrix<f64>> {
    CovarianceEstimator::new(problem)?.block(block)
}
