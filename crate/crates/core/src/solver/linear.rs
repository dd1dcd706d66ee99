//! Block-sparse assembly of the whitened normal equations.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::cholesky::{factorize_symbolic_cholesky, LltRef, SymbolicCholesky, SymmetricOrdering};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par, Side};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::problem::{BlockId, Problem, ResidualBlock};
use crate::{Error, Result};

const NUMERIC_STEP: f64 = 1e-7;

/// Free (non-constant) blocks in elimination order with their offsets.
pub(crate) struct Layout {
    pub order: Vec<BlockId>,
    pub offset: Vec<Option<usize>>,
    pub dims: Vec<usize>,
    pub size: usize,
}

impl Layout {
    pub fn new(problem: &Problem) -> Self {
        let used: Vec<bool> = {
            let mut u = vec![false; problem.params.len()];
            for r in &problem.residuals {
                for &b in &r.blocks {
                    u[b] = true;
                }
            }
            u
        };
        let free = |b: &BlockId| used[*b] && !problem.params[*b].constant;
        let mut order: Vec<BlockId> = (0..problem.params.len())
            .filter(|b| free(b) && problem.params[*b].eliminate_first)
            .collect();
        order.extend((0..problem.params.len()).filter(|b| free(b) && !problem.params[*b].eliminate_first));
        let mut offset = vec![None; problem.params.len()];
        let mut dims = Vec::with_capacity(order.len());
        let mut size = 0;
        for &b in &order {
            offset[b] = Some(size);
            let d = problem.params[b].manifold.tangent_dim();
            dims.push(d);
            size += d;
        }
        Layout { order, offset, dims, size }
    }

    fn index_of(&self) -> Vec<Option<usize>> {
        let mut idx = vec![None; self.offset.len()];
        for (i, &b) in self.order.iter().enumerate() {
            idx[b] = Some(i);
        }
        idx
    }
}

/// Scalar CSC pattern of the (full, symmetric) normal matrix.
pub(crate) struct Pattern {
    pub col_offsets: Vec<usize>,
    pub row_indices: Vec<usize>,
    /// For each block column, sorted `(row block, cumulative row offset)`.
    block_cols: Vec<Vec<(usize, usize)>>,
    block_index: Vec<Option<usize>>,
    pub diag_pos: Vec<usize>,
    /// Fill-reducing symbolic factorization, shared by all numeric factorizations.
    symbolic: SymbolicCholesky<usize>,
}

impl Pattern {
    pub fn new(problem: &Problem, layout: &Layout) -> Self {
        let block_index = layout.index_of();
        let nb = layout.order.len();
        let mut neighbours: Vec<Vec<usize>> = (0..nb).map(|i| vec![i]).collect();
        for r in &problem.residuals {
            let free: Vec<usize> = r.blocks.iter().filter_map(|&b| block_index[b]).collect();
            for &a in &free {
                neighbours[a].extend(free.iter().copied());
            }
        }
        let mut block_cols = Vec::with_capacity(nb);
        for n in neighbours.iter_mut() {
            n.sort_unstable();
            n.dedup();
            let mut cum = 0;
            let col: Vec<(usize, usize)> = n
                .iter()
                .map(|&rb| {
                    let e = (rb, cum);
                    cum += layout.dims[rb];
                    e
                })
                .collect();
            block_cols.push(col);
        }
        let mut col_offsets = Vec::with_capacity(layout.size + 1);
        let mut row_indices = Vec::new();
        let mut diag_pos = vec![0; layout.size];
        col_offsets.push(0);
        for (cb, col) in block_cols.iter().enumerate() {
            let c0 = layout.offset[layout.order[cb]].unwrap();
            for k in 0..layout.dims[cb] {
                for &(rb, _) in col {
                    let r0 = layout.offset[layout.order[rb]].unwrap();
                    if rb == cb {
                        diag_pos[c0 + k] = row_indices.len() + k;
                    }
                    row_indices.extend(r0..r0 + layout.dims[rb]);
                }
                col_offsets.push(row_indices.len());
            }
        }
        let n = layout.size;
        let sym = SymbolicSparseColMatRef::new_checked(n, n, &col_offsets, None, &row_indices);
        let symbolic = factorize_symbolic_cholesky(sym, Side::Lower, SymmetricOrdering::Amd, Default::default())
            .expect("symbolic factorization of a valid pattern");
        Pattern {
            col_offsets,
            row_indices,
            block_cols,
            block_index,
            diag_pos,
            symbolic,
        }
    }

    pub fn nnz(&self) -> usize {
        self.row_indices.len()
    }

    fn position(&self, layout: &Layout, rb: usize, cb: usize, i: usize, k: usize) -> usize {
        let col = &self.block_cols[cb];
        let at = col.binary_search_by_key(&rb, |e| e.0).expect("block pair missing from pattern");
        let c = layout.offset[layout.order[cb]].unwrap() + k;
        self.col_offsets[c] + col[at].1 + i
    }

    pub fn size(&self) -> usize {
        self.col_offsets.len() - 1
    }

    /// Wraps previously computed factor values.
    pub fn factor_from_values<'a>(&'a self, values: &'a [f64]) -> Factor<'a> {
        Factor { pattern: self, values: std::borrow::Cow::Borrowed(values) }
    }
}

/// A linearized, whitened and robustified residual block.
pub(crate) struct Linearized {
    pub residual: DVector<f64>,
    pub jacobians: Vec<Option<DMatrix<f64>>>,
    pub cost: f64,
}

fn finite(v: impl IntoIterator<Item = f64>) -> bool {
    v.into_iter().all(f64::is_finite)
}

pub(crate) fn numeric_jacobians(problem: &Problem, r: &ResidualBlock, base: &DVector<f64>) -> Vec<DMatrix<f64>> {
    let vals: Vec<Vec<f64>> = r.blocks.iter().map(|&b| problem.params[b].values.clone()).collect();
    r.blocks
        .iter()
        .enumerate()
        .map(|(slot, &b)| {
            let m = problem.params[b].manifold;
            let td = m.tangent_dim();
            let mut jac = DMatrix::zeros(base.len(), td);
            for k in 0..td {
                let mut delta = vec![0.0; td];
                delta[k] = NUMERIC_STEP;
                let mut shifted = vals.clone();
                shifted[slot] = m.plus(&vals[slot], &delta);
                let refs: Vec<&[f64]> = shifted.iter().map(|v| v.as_slice()).collect();
                let e = r.function.evaluate(&refs, false).residual;
                jac.set_column(k, &((e - base) / NUMERIC_STEP));
            }
            jac
        })
        .collect()
}

/// Evaluates every residual block; with `jacobians`, also the whitened,
/// robust-weighted Jacobians of the free blocks.
pub(crate) fn linearize(problem: &Problem, layout: &Layout, jacobians: bool) -> Result<Vec<Linearized>> {
    problem
        .residuals
        .par_iter()
        .enumerate()
        .map(|(id, r)| {
            let vals = problem.block_values(r);
            let eval = r.function.evaluate(&vals, jacobians);
            if eval.residual.len() != r.function.dim() || !finite(eval.residual.iter().copied()) {
                return Err(Error::SolverAbort {
                    block: id,
                    reason: "non-finite or mis-sized residual".into(),
                });
            }
            let white = &r.whitening * &eval.residual;
            let s = white.norm_squared();
            let (rho, drho) = r.loss.evaluate(s);
            let weight = drho.sqrt();
            let jacs = if jacobians {
                let raw = match eval.jacobians {
                    Some(j) => j,
                    None => numeric_jacobians(problem, r, &eval.residual),
                };
                if raw.len() != r.blocks.len() {
                    return Err(Error::SolverAbort {
                        block: id,
                        reason: "jacobian count does not match block count".into(),
                    });
                }
                raw.into_iter()
                    .zip(&r.blocks)
                    .map(|(j, &b)| {
                        if !finite(j.iter().copied()) {
                            return Err(Error::SolverAbort {
                                block: id,
                                reason: "non-finite jacobian".into(),
                            });
                        }
                        Ok(layout.offset[b].map(|_| (&r.whitening * j) * weight))
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            Ok(Linearized {
                residual: white * weight,
                jacobians: jacs,
                cost: 0.5 * rho,
            })
        })
        .collect()
}

pub(crate) fn total_cost(lin: &[Linearized]) -> f64 {
    lin.iter().map(|l| l.cost).sum()
}

/// Assembles `H = JᵀJ` values (pattern order) and the gradient `g = Jᵀr`.
pub(crate) fn assemble(problem: &Problem, layout: &Layout, pattern: &Pattern, lin: &[Linearized]) -> (Vec<f64>, DVector<f64>) {
    let mut values = vec![0.0; pattern.nnz()];
    let mut grad = DVector::zeros(layout.size);
    for (r, l) in problem.residuals.iter().zip(lin) {
        for (sa, &a) in r.blocks.iter().enumerate() {
            let (Some(ja), Some(oa)) = (&l.jacobians[sa], layout.offset[a]) else { continue };
            let cb = pattern.block_index[a].unwrap();
            let ga = ja.transpose() * &l.residual;
            let mut seg = grad.rows_mut(oa, ga.len());
            seg += ga;
            for (sb, &b) in r.blocks.iter().enumerate() {
                let Some(jb) = &l.jacobians[sb] else { continue };
                let rb = pattern.block_index[b].unwrap();
                let hb = jb.transpose() * ja;
                for k in 0..hb.ncols() {
                    let start = pattern.position(layout, rb, cb, 0, k);
                    for i in 0..hb.nrows() {
                        values[start + i] += hb[(i, k)];
                    }
                }
            }
        }
    }
    (values, grad)
}

/// Numeric Cholesky factor of a matrix with a given pattern.
pub(crate) struct Factor<'a> {
    pattern: &'a Pattern,
    values: std::borrow::Cow<'a, [f64]>,
}

impl Factor<'_> {
    pub fn into_values(self) -> Vec<f64> {
        self.values.into_owned()
    }

    /// Solves `H X = B` in place.
    pub fn solve_mut(&self, rhs: &mut DMatrix<f64>) {
        let (n, k) = rhs.shape();
        let symbolic = &self.pattern.symbolic;
        let mut mem = MemBuffer::new(symbolic.solve_in_place_scratch::<f64>(k, Par::Seq));
        let llt = LltRef::new(symbolic, &self.values);
        let mat = MatMut::from_column_major_slice_mut(rhs.as_mut_slice(), n, k);
        llt.solve_in_place_with_conj(Conj::No, mat, Par::Seq, MemStack::new(&mut mem));
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut m = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
        self.solve_mut(&mut m);
        DVector::from_column_slice(m.as_slice())
    }
}

/// Factors the matrix with `values` laid out as `pattern`; `None` if it is
/// not numerically positive definite.
pub(crate) fn factor<'a>(pattern: &'a Pattern, values: &[f64]) -> Option<Factor<'a>> {
    let n = pattern.size();
    let symbolic = &pattern.symbolic;
    let mut l = vec![0.0; symbolic.len_val()];
    let mut mem = MemBuffer::new(symbolic.factorize_numeric_llt_scratch::<f64>(Par::Seq, Default::default()));
    let sym = SymbolicSparseColMatRef::new_checked(n, n, &pattern.col_offsets, None, &pattern.row_indices);
    let mat = SparseColMatRef::new(sym, values);
    symbolic
        .factorize_numeric_llt(&mut l, mat, Side::Lower, Default::default(), Par::Seq, MemStack::new(&mut mem), Default::default())
        .ok()?;
    Some(Factor { pattern, values: std::borrow::Cow::Owned(l) })
}
