use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DVector;

use super::linear::{assemble, factor, linearize, total_cost, Layout, Pattern};
use super::problem::{Group, Problem};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOptions {
    pub max_iters: usize,
    pub gradient_tol: f64,
    pub param_tol: f64,
    /// Relative cost decrease below which the solve stops.
    pub function_tol: f64,
    pub initial_lambda: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            gradient_tol: 1e-8,
            param_tol: 1e-12,
            function_tol: 1e-10,
            initial_lambda: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    ParameterTolerance,
    FunctionTolerance,
    MaxIterations,
    /// Damping grew without finding a cost-reducing step.
    NoProgress,
}

impl Termination {
    pub fn is_failure(&self) -> bool {
        false
    }

    pub fn name(&self) -> &'static str {
        match self {
            Termination::GradientTolerance => "gradient-tolerance",
            Termination::ParameterTolerance => "parameter-tolerance",
            Termination::FunctionTolerance => "function-tolerance",
            Termination::MaxIterations => "max-iterations",
            Termination::NoProgress => "no-progress",
        }
    }
}

#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub lambda: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct GroupResiduals {
    /// Whitened residual components `Σ^(-1/2) r` (before robust weighting).
    pub whitened: Vec<f64>,
    pub redundancy: i64,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub termination: Termination,
    pub groups: BTreeMap<Group, GroupResiduals>,
    pub log: Vec<IterationRecord>,
}

impl SolveReport {
    /// Per-iteration cost trace followed by per-group variance factors.
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("iteration,cost,lambda,accepted\n");
        for r in &self.log {
            let _ = writeln!(out, "{},{:.12e},{:.3e},{}", r.iteration, r.cost, r.lambda, r.accepted as u8);
        }
        out.push_str("group,components,redundancy,variance_factor\n");
        for (g, res) in &self.groups {
            let vf = super::variance_factor(self, *g).map(|v| format!("{v:.9}")).unwrap_or_else(|_| "nan".into());
            let _ = writeln!(out, "{},{},{},{}", g, res.whitened.len(), res.redundancy, vf);
        }
        out
    }
}

/// Summarizes the current state of `problem` without optimizing.
pub fn report_at_current(problem: &Problem) -> SolveReport {
    let cost = problem.cost();
    SolveReport {
        initial_cost: cost,
        final_cost: cost,
        iterations: 0,
        accepted_steps: 0,
        termination: Termination::GradientTolerance,
        groups: group_residuals(problem),
        log: Vec::new(),
    }
}

fn group_residuals(problem: &Problem) -> BTreeMap<Group, GroupResiduals> {
    let redundancy = problem.redundancy_by_group();
    problem
        .whitened_by_group()
        .into_iter()
        .map(|(g, whitened)| {
            let redundancy = redundancy.get(&g).copied().unwrap_or(0);
            (g, GroupResiduals { whitened, redundancy })
        })
        .collect()
}

fn apply_step(problem: &mut Problem, layout: &Layout, step: &DVector<f64>) -> Vec<(usize, Vec<f64>)> {
    let mut saved = Vec::with_capacity(layout.order.len());
    for (&b, &d) in layout.order.iter().zip(&layout.dims) {
        let o = layout.offset[b].unwrap();
        let block = &mut problem.params[b];
        let new = block.manifold.plus(&block.values, &step.as_slice()[o..o + d]);
        saved.push((b, std::mem::replace(&mut block.values, new)));
    }
    saved
}

fn restore(problem: &mut Problem, saved: Vec<(usize, Vec<f64>)>) {
    for (b, v) in saved {
        problem.params[b].values = v;
    }
}

/// Levenberg-Marquardt with multiplicative damping on the Hessian diagonal.
pub fn solve(problem: &mut Problem, options: &SolveOptions) -> Result<SolveReport> {
    let layout = Layout::new(problem);
    if layout.size == 0 {
        return Err(Error::EmptyProblem);
    }
    let pattern = Pattern::new(problem, &layout);

    let mut lin = linearize(problem, &layout, true)?;
    let initial_cost = total_cost(&lin);
    let mut cost = initial_cost;
    let mut lambda = options.initial_lambda;
    let mut log = Vec::new();
    let mut accepted_steps = 0;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    let (mut hess, mut grad) = assemble(problem, &layout, &pattern, &lin);
    'outer: while iterations < options.max_iters {
        if grad.amax() <= options.gradient_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        iterations += 1;
        let mut damped = hess.clone();
        for &p in &pattern.diag_pos {
            damped[p] += lambda * hess[p].max(1e-9);
        }
        let Some(chol) = factor(&pattern, &damped) else {
            lambda *= 10.0;
            log.push(IterationRecord { iteration: iterations, cost, lambda, accepted: false });
            if lambda > 1e16 {
                termination = Termination::NoProgress;
                break;
            }
            continue;
        };
        let step = -chol.solve(&grad);
        let x_norm: f64 = layout
            .order
            .iter()
            .map(|&b| problem.params[b].values.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if step.norm() <= options.param_tol * (x_norm + options.param_tol) {
            termination = Termination::ParameterTolerance;
            break;
        }
        let saved = apply_step(problem, &layout, &step);
        let trial = linearize(problem, &layout, false).ok().map(|l| total_cost(&l));
        match trial {
            Some(new_cost) if new_cost.is_finite() && new_cost < cost => {
                accepted_steps += 1;
                let decrease = cost - new_cost;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-15);
                log.push(IterationRecord { iteration: iterations, cost, lambda, accepted: true });
                lin = linearize(problem, &layout, true)?;
                (hess, grad) = assemble(problem, &layout, &pattern, &lin);
                if decrease <= options.function_tol * cost.max(f64::MIN_POSITIVE) {
                    termination = Termination::FunctionTolerance;
                    break 'outer;
                }
            }
            _ => {
                restore(problem, saved);
                lambda *= 10.0;
                log.push(IterationRecord { iteration: iterations, cost, lambda, accepted: false });
                if lambda > 1e16 {
                    termination = Termination::NoProgress;
                    break;
                }
            }
        }
    }

    Ok(SolveReport {
        initial_cost,
        final_cost: cost,
        iterations,
        accepted_steps,
        termination,
        groups: group_residuals(problem),
        log,
    })
}
