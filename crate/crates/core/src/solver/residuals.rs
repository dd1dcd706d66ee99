//! General-purpose residual functions.

use nalgebra::{DMatrix, DVector};

use super::manifold::Manifold;
use super::problem::{Evaluation, Residual};

/// Gaussian prior `x ⊟ mean` on a single block.
pub struct Prior {
    pub manifold: Manifold,
    pub mean: Vec<f64>,
}

impl Residual for Prior {
    fn dim(&self) -> usize {
        self.manifold.tangent_dim()
    }

    fn evaluate(&self, params: &[&[f64]], want_jacobians: bool) -> Evaluation {
        let r = DVector::from_vec(self.manifold.minus(&self.mean, params[0]));
        let jacobians = match self.manifold {
            Manifold::Euclidean(n) if want_jacobians => Some(vec![DMatrix::identity(n, n)]),
            _ => None,
        };
        Evaluation { residual: r, jacobians }
    }
}

/// Wraps a closure computing the residual; Jacobians come from finite differences.
pub struct FnResidual<F> {
    dim: usize,
    f: F,
}

impl<F> FnResidual<F>
where
    F: Fn(&[&[f64]]) -> DVector<f64> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Residual for FnResidual<F>
where
    F: Fn(&[&[f64]]) -> DVector<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, params: &[&[f64]], _want_jacobians: bool) -> Evaluation {
        Evaluation::residual_only((self.f)(params))
    }
}
