use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::manifold::Manifold;
use crate::{Error, Result};

pub type BlockId = usize;
pub type ResidualId = usize;

/// Label used to group residuals for weighting and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    MarkerReprojection,
    CpWorld,
    FeatureReprojection,
    ImuPreintegration,
    BiasWalk,
    Generic,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::MarkerReprojection,
        Group::CpWorld,
        Group::FeatureReprojection,
        Group::ImuPreintegration,
        Group::BiasWalk,
        Group::Generic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Group::MarkerReprojection => "marker-reprojection",
            Group::CpWorld => "cp-world",
            Group::FeatureReprojection => "feature-reprojection",
            Group::ImuPreintegration => "imu-preintegration",
            Group::BiasWalk => "bias-walk",
            Group::Generic => "generic",
        }
    }

    pub fn from_name(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == s)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RobustLoss {
    None,
    Huber(f64),
    Cauchy(f64),
}

impl RobustLoss {
    /// `ρ(s)` and `ρ'(s)` for a squared whitened norm `s`.
    pub fn evaluate(&self, s: f64) -> (f64, f64) {
        match *self {
            RobustLoss::None => (s, 1.0),
            RobustLoss::Huber(d) => {
                if s <= d * d {
                    (s, 1.0)
                } else {
                    let r = s.sqrt();
                    (2.0 * d * r - d * d, d / r)
                }
            }
            RobustLoss::Cauchy(c) => {
                let c2 = c * c;
                (c2 * (s / c2).ln_1p(), 1.0 / (1.0 + s / c2))
            }
        }
    }
}

/// Output of a residual function: the raw residual and, when available,
/// Jacobians with respect to each block's tangent space.
pub struct Evaluation {
    pub residual: DVector<f64>,
    pub jacobians: Option<Vec<DMatrix<f64>>>,
}

impl Evaluation {
    pub fn residual_only(residual: DVector<f64>) -> Self {
        Self { residual, jacobians: None }
    }
}

/// A residual function over one or more parameter blocks.
///
/// Residuals are returned unwhitened; the problem whitens them with the
/// residual block's covariance. Returning `None` for the Jacobians makes the
/// solver fall back to forward differences through the manifold retraction.
pub trait Residual: Send + Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, params: &[&[f64]], want_jacobians: bool) -> Evaluation;
}

pub struct ParameterBlock {
    pub values: Vec<f64>,
    pub manifold: Manifold,
    pub constant: bool,
    /// Ordered ahead of other blocks in the normal equations so that
    /// factorization eliminates them first (landmarks, proxy points).
    pub eliminate_first: bool,
}

pub struct ResidualBlock {
    pub function: Box<dyn Residual>,
    pub blocks: Vec<BlockId>,
    pub group: Group,
    pub covariance: DMatrix<f64>,
    pub(crate) whitening: DMatrix<f64>,
    pub loss: RobustLoss,
    /// Residual ties its blocks to an absolute reference (prior, surveyed point).
    pub anchors_gauge: bool,
}

impl ResidualBlock {
    pub fn whitening(&self) -> &DMatrix<f64> {
        &self.whitening
    }
}

/// Symmetric inverse square root `Σ^(-1/2)`.
pub fn inverse_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if n != cov.ncols() || n == 0 {
        return Err(Error::InvalidInput("covariance must be square and non-empty".into()));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    if (&sym - cov).amax() > 1e-9 * cov.amax().max(1e-300) {
        return Err(Error::InvalidInput("covariance is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.amax();
    if eig.eigenvalues.iter().any(|&l| !(l > 1e-14 * max) || !l.is_finite()) {
        return Err(Error::InvalidInput("covariance is not positive-definite".into()));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

#[derive(Default)]
pub struct Problem {
    pub(crate) params: Vec<ParameterBlock>,
    pub(crate) residuals: Vec<ResidualBlock>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_parameter(&mut self, values: Vec<f64>, manifold: Manifold) -> BlockId {
        assert_eq!(values.len(), manifold.ambient_dim(), "ambient size mismatch for {manifold:?}");
        self.params.push(ParameterBlock {
            values,
            manifold,
            constant: false,
            eliminate_first: false,
        });
        self.params.len() - 1
    }

    pub fn set_constant(&mut self, id: BlockId, constant: bool) {
        self.params[id].constant = constant;
    }

    pub fn set_eliminate_first(&mut self, id: BlockId, flag: bool) {
        self.params[id].eliminate_first = flag;
    }

    pub fn add_residual(
        &mut self,
        function: Box<dyn Residual>,
        blocks: Vec<BlockId>,
        group: Group,
        covariance: DMatrix<f64>,
        loss: RobustLoss,
    ) -> Result<ResidualId> {
        for &b in &blocks {
            if b >= self.params.len() {
                return Err(Error::InvalidInput(format!("residual references missing parameter block {b}")));
            }
        }
        if covariance.nrows() != function.dim() {
            return Err(Error::InvalidInput(format!(
                "covariance is {}x{} but residual dimension is {}",
                covariance.nrows(),
                covariance.ncols(),
                function.dim()
            )));
        }
        let whitening = inverse_sqrt(&covariance)?;
        self.residuals.push(ResidualBlock {
            function,
            blocks,
            group,
            covariance,
            whitening,
            loss,
            anchors_gauge: false,
        });
        Ok(self.residuals.len() - 1)
    }

    /// Marks a residual as an absolute constraint for the gauge precondition.
    pub fn set_anchor(&mut self, id: ResidualId, anchors: bool) {
        self.residuals[id].anchors_gauge = anchors;
    }

    pub fn parameter(&self, id: BlockId) -> &[f64] {
        &self.params[id].values
    }

    pub fn set_parameter(&mut self, id: BlockId, values: Vec<f64>) {
        assert_eq!(values.len(), self.params[id].values.len());
        self.params[id].values = values;
    }

    pub fn parameter_block(&self, id: BlockId) -> &ParameterBlock {
        &self.params[id]
    }

    pub fn residual_block(&self, id: ResidualId) -> &ResidualBlock {
        &self.residuals[id]
    }

    pub fn num_parameter_blocks(&self) -> usize {
        self.params.len()
    }

    pub fn num_residual_blocks(&self) -> usize {
        self.residuals.len()
    }

    pub fn residual_ids_in(&self, group: Group) -> impl Iterator<Item = ResidualId> + '_ {
        self.residuals
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.group == group)
            .map(|(i, _)| i)
    }

    pub fn count_in_group(&self, group: Group) -> usize {
        self.residual_ids_in(group).count()
    }

    /// Multiplies the measurement covariance of every residual in `group`.
    pub fn scale_group_covariance(&mut self, group: Group, factor: f64) -> Result<()> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidInput(format!("covariance factor must be positive, got {factor}")));
        }
        let w = 1.0 / factor.sqrt();
        for r in self.residuals.iter_mut().filter(|r| r.group == group) {
            r.covariance *= factor;
            r.whitening *= w;
        }
        Ok(())
    }

    pub(crate) fn block_values<'a>(&'a self, r: &ResidualBlock) -> Vec<&'a [f64]> {
        r.blocks.iter().map(|&b| self.params[b].values.as_slice()).collect()
    }

    /// Whitened residual `Σ^(-1/2) r` of one block at the current parameters.
    pub fn whitened_residual(&self, id: ResidualId) -> DVector<f64> {
        let r = &self.residuals[id];
        let vals = self.block_values(r);
        &r.whitening * r.function.evaluate(&vals, false).residual
    }

    /// Whitened residual components per group at the current parameters.
    pub fn whitened_by_group(&self) -> BTreeMap<Group, Vec<f64>> {
        let mut out: BTreeMap<Group, Vec<f64>> = BTreeMap::new();
        for (i, r) in self.residuals.iter().enumerate() {
            out.entry(r.group).or_default().extend(self.whitened_residual(i).iter());
        }
        out
    }

    /// Redundancy per group: residual components minus the tangent dimensions
    /// of free blocks observed exclusively by that group.
    pub fn redundancy_by_group(&self) -> BTreeMap<Group, i64> {
        let mut observers: Vec<Option<Option<Group>>> = vec![None; self.params.len()];
        let mut comps: BTreeMap<Group, i64> = BTreeMap::new();
        for r in &self.residuals {
            *comps.entry(r.group).or_default() += r.function.dim() as i64;
            for &b in &r.blocks {
                observers[b] = match observers[b] {
                    None => Some(Some(r.group)),
                    Some(Some(g)) if g == r.group => Some(Some(g)),
                    _ => Some(None),
                };
            }
        }
        for (b, obs) in observers.iter().enumerate() {
            if let Some(Some(g)) = obs {
                if !self.params[b].constant {
                    *comps.entry(*g).or_default() -= self.params[b].manifold.tangent_dim() as i64;
                }
            }
        }
        comps
    }

    /// Whether the problem has a constant block or an anchoring residual.
    pub fn gauge_fixed(&self) -> bool {
        let used_constant = self
            .residuals
            .iter()
            .any(|r| r.blocks.iter().any(|&b| self.params[b].constant));
        used_constant || self.residuals.iter().any(|r| r.anchors_gauge)
    }

    /// Total robustified cost `½ Σ ρ(‖r'‖²)`.
    pub fn cost(&self) -> f64 {
        self.residuals
            .iter()
            .map(|r| {
                let w = &r.whitening * r.function.evaluate(&self.block_values(r), false).residual;
                0.5 * r.loss.evaluate(w.norm_squared()).0
            })
            .sum()
    }
}
