//! Minimization of `ĝ` / `ḡ` over the gain polyhedron `{K : H K <= d}`.
//!
//! The objectives are convex, continuously differentiable and piecewise
//! quadratic. [`minimize`] runs projected gradient with Armijo backtracking
//! (monotone), and after every accepted step tries a Newton step restricted
//! to the current active face using the Hessian of the quadratic piece the
//! iterate sits in. Projection is componentwise clipping for boxes and a
//! least-distance QP (via NNLS) otherwise.
//!
//! Termination requires both a small projected-gradient norm and a small
//! KKT stationarity residual with nonnegative multipliers on active rows.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;
use crate::model::ConstraintSpec;
use crate::objective::{Branch, ObjectiveContext, ObjectiveError};
use crate::par::{self, Execution};

/// Gains larger than this are taken as evidence of an unbounded problem.
pub const DIVERGENCE_NORM: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Tolerance on the projected-gradient norm, relative to the curvature scale.
    pub tol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Step shrink factor used in backtracking.
    pub backtrack: f64,
    pub execution: Execution,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-9,
            max_iter: 10_000,
            armijo: 1e-4,
            backtrack: 0.5,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub k: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    /// `min_{λ >= 0} ||∇ + H_A' λ||` over the active rows.
    pub kkt_residual: f64,
    /// `||K - P(K - s ∇)|| / s` at the final iterate.
    pub pg_norm: f64,
    /// Indices (into the original `H`) of tight constraints.
    pub active_rows: Vec<usize>,
    pub converged: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("gain set is empty")]
    Infeasible,
    #[error("objective is unbounded below along a recession direction (|K| = {norm:e})")]
    UnboundedBelow { norm: f64 },
    #[error("no convergence after {} iterations (projected gradient {:e})", .0.iterations, .0.pg_norm)]
    MaxIterations(Box<SolveResult>),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("constraint has {found} columns, objective has {expected} controls")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("grid oracle needs a bounded box constraint")]
    NonBoxConstraint,
    #[error("grid oracle supports at most 3 controls, got {0}")]
    DimensionTooLarge(usize),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(&'static str),
}

enum Projector {
    Free,
    Box {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    Poly {
        h: DMatrix<f64>,
        d: DVector<f64>,
    },
}

impl Projector {
    fn new(c: &ConstraintSpec) -> Result<Self, SolverError> {
        if c.is_unconstrained() {
            return Ok(Projector::Free);
        }
        if let Some(b) = c.as_box() {
            if b.lower.iter().zip(b.upper.iter()).any(|(l, u)| l > u) {
                return Err(SolverError::Infeasible);
            }
            return Ok(Projector::Box {
                lower: b.lower,
                upper: b.upper,
            });
        }
        c.feasible_gain().map_err(|_| SolverError::Infeasible)?;
        let (h, d) = c.effective_rows();
        Ok(Projector::Poly { h, d })
    }

    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Projector::Free => v.clone(),
            Projector::Box { lower, upper } => {
                // `+ 0.0` turns a clamped -0.0 into +0.0
                DVector::from_iterator(
                    v.len(),
                    (0..v.len()).map(|i| v[i].clamp(lower[i], upper[i]) + 0.0),
                )
            }
            Projector::Poly { h, d } => {
                // min ||x|| s.t. H (v + x) <= d  <=>  (-H) x >= H v - d
                let rhs = h * v - d;
                match linalg::ldp(&(-h), &rhs) {
                    Some(x) => v + x,
                    None => v.clone(),
                }
            }
        }
    }
}

struct Problem<'a> {
    ctx: &'a ObjectiveContext,
    branch: Branch,
    constraint: &'a ConstraintSpec,
    proj: Projector,
    /// Curvature scale used to normalize tolerances and the initial step.
    scale: f64,
}

impl Problem<'_> {
    fn f(&self, k: &DVector<f64>) -> f64 {
        self.ctx.value_unchecked(self.branch, k)
    }

    fn grad(&self, k: &DVector<f64>) -> DVector<f64> {
        self.ctx.grad_unchecked(self.branch, k)
    }

    fn active_rows(&self, k: &DVector<f64>) -> Vec<usize> {
        let c = self.constraint;
        (0..c.n_rows())
            .filter(|&i| {
                let row = c.h.row(i);
                if row.iter().all(|&v| v == 0.0) {
                    return false;
                }
                let slack = c.d[i] - row.dot(&k.transpose());
                slack <= 1e-9 * (1.0 + c.d[i].abs())
            })
            .collect()
    }

    fn pg_norm(&self, k: &DVector<f64>, g: &DVector<f64>) -> f64 {
        let s = 1.0 / self.scale;
        let p = self.proj.project(&(k - g * s));
        (k - p).norm() / s
    }

    fn kkt_residual(&self, g: &DVector<f64>, active: &[usize]) -> f64 {
        if active.is_empty() {
            return g.norm();
        }
        let ha_t = self.constraint.h.select_rows(active.iter()).transpose();
        let lambda = linalg::nnls(&ha_t, &(-g));
        (ha_t * lambda + g).norm()
    }

    /// Newton step on the face defined by the currently active rows.
    fn newton(&self, k: &DVector<f64>, f: f64, armijo: f64) -> Option<(DVector<f64>, f64)> {
        let active = self.active_rows(k);
        let ha = self.constraint.h.select_rows(active.iter());
        let z = linalg::null_space(&ha);
        if z.ncols() == 0 {
            return None;
        }
        let q = self.ctx.hessian_unchecked(self.branch, k);
        let g = self.grad(k);
        let qr = z.transpose() * &q * &z;
        let gr = z.transpose() * &g;
        let y = qr.cholesky()?.solve(&(-gr));
        let dir = &z * y;
        let slope = g.dot(&dir);
        if dir.norm() <= 1e-15 * (1.0 + k.norm()) || slope >= 0.0 {
            return None;
        }
        let c = self.constraint;
        let mut alpha_max: f64 = 1.0;
        for i in 0..c.n_rows() {
            if active.contains(&i) {
                continue;
            }
            let hd = c.h.row(i).dot(&dir.transpose());
            if hd > 0.0 {
                let slack = c.d[i] - c.h.row(i).dot(&k.transpose());
                alpha_max = alpha_max.min(slack.max(0.0) / hd);
            }
        }
        let mut alpha = alpha_max;
        for _ in 0..40 {
            if alpha <= 0.0 {
                break;
            }
            let cand = match self.proj {
                Projector::Box { .. } => self.proj.project(&(k + &dir * alpha)),
                _ => k + &dir * alpha,
            };
            let fc = self.f(&cand);
            if fc <= f + armijo * alpha * slope {
                return Some((cand, fc));
            }
            alpha *= 0.5;
        }
        None
    }

    fn result(&self, k: DVector<f64>, iterations: usize, converged: bool) -> SolveResult {
        let g = self.grad(&k);
        let active = self.active_rows(&k);
        SolveResult {
            value: self.f(&k),
            kkt_residual: self.kkt_residual(&g, &active),
            pg_norm: self.pg_norm(&k, &g),
            active_rows: active,
            iterations,
            converged,
            k,
        }
    }
}

fn curvature_scale(ctx: &ObjectiveContext) -> f64 {
    let bmax = ctx
        .dist
        .b
        .iter()
        .map(|b| b.norm_squared())
        .fold(0.0, f64::max);
    (2.0 * ctx.cost.r.amax() * ctx.dim() as f64 + 2.0 * ctx.max_value() * bmax).max(1.0)
}

/// Minimizes `ĝ` or `ḡ` over `{K : H K <= d}`.
pub fn minimize(
    ctx: &ObjectiveContext,
    branch: Branch,
    constraint: &ConstraintSpec,
    cfg: &SolverConfig,
) -> Result<SolveResult, SolverError> {
    if !(cfg.tol > 0.0) {
        return Err(SolverError::InvalidConfig("tol must be positive"));
    }
    if constraint.dim() != ctx.dim() {
        return Err(SolverError::DimensionMismatch {
            expected: ctx.dim(),
            found: constraint.dim(),
        });
    }
    let prob = Problem {
        ctx,
        branch,
        constraint,
        proj: Projector::new(constraint)?,
        scale: curvature_scale(ctx),
    };
    let tol = cfg.tol * prob.scale;

    let mut k = match ctx.symmetric_unconstrained_minimizer(branch) {
        Some(k0) if k0.iter().all(|v| v.is_finite()) => prob.proj.project(&k0),
        _ => prob.proj.project(&DVector::zeros(ctx.dim())),
    };
    if !constraint.contains(&k, 1e-8 * (1.0 + constraint.d.amax())) {
        k = constraint
            .feasible_gain()
            .map_err(|_| SolverError::Infeasible)?;
    }
    let mut f = prob.f(&k);
    let mut step = 1.0 / prob.scale;

    for iter in 0..cfg.max_iter {
        let g = prob.grad(&k);
        if prob.pg_norm(&k, &g) <= tol {
            let active = prob.active_rows(&k);
            if prob.kkt_residual(&g, &active) <= 10.0 * tol {
                return Ok(prob.result(k, iter, true));
            }
        }
        if k.norm() > DIVERGENCE_NORM {
            return Err(SolverError::UnboundedBelow { norm: k.norm() });
        }

        // projected-gradient step with backtracking
        let mut moved = false;
        let mut s = step;
        for _ in 0..80 {
            let trial = prob.proj.project(&(&k - &g * s));
            let diff = &trial - &k;
            if diff.norm() == 0.0 {
                break;
            }
            let ft = prob.f(&trial);
            if ft <= f + cfg.armijo * g.dot(&diff) {
                k = trial;
                f = ft;
                moved = true;
                break;
            }
            s *= cfg.backtrack;
        }
        step = (s * 2.0).min(1e6 / prob.scale);

        if let Some((kn, fn_)) = prob.newton(&k, f, cfg.armijo) {
            k = kn;
            f = fn_;
            moved = true;
        }
        if !moved {
            // No descent possible at machine precision.
            let res = prob.result(k, iter + 1, false);
            let converged = res.pg_norm <= 10.0 * tol && res.kkt_residual <= 100.0 * tol;
            return if converged {
                Ok(SolveResult { converged, ..res })
            } else {
                Err(SolverError::MaxIterations(Box::new(res)))
            };
        }
    }
    let res = prob.result(k, cfg.max_iter, false);
    if res.k.norm() > DIVERGENCE_NORM {
        return Err(SolverError::UnboundedBelow { norm: res.k.norm() });
    }
    Err(SolverError::MaxIterations(Box::new(res)))
}

fn axis_points(lo: f64, hi: f64, resolution: f64) -> Vec<f64> {
    let count = ((hi - lo) / resolution + 1e-9).floor() as usize + 1;
    let mut pts: Vec<f64> = (0..count).map(|i| lo + i as f64 * resolution).collect();
    if let Some(&last) = pts.last() {
        if last < hi - 1e-12 {
            pts.push(hi);
        }
    }
    pts
}

/// Exhaustive grid minimization over a bounded box with at most three
/// controls. Intended as an independent check on [`minimize`].
pub fn brute_force_oracle(
    ctx: &ObjectiveContext,
    branch: Branch,
    constraint: &ConstraintSpec,
    resolution: f64,
    execution: Execution,
) -> Result<SolveResult, SolverError> {
    let n = ctx.dim();
    if constraint.dim() != n {
        return Err(SolverError::DimensionMismatch {
            expected: n,
            found: constraint.dim(),
        });
    }
    if n > 3 {
        return Err(SolverError::DimensionTooLarge(n));
    }
    if !(resolution > 0.0) {
        return Err(SolverError::InvalidConfig("resolution must be positive"));
    }
    let bounds = constraint.as_box().ok_or(SolverError::NonBoxConstraint)?;
    if bounds
        .lower
        .iter()
        .chain(bounds.upper.iter())
        .any(|v| !v.is_finite())
    {
        return Err(SolverError::NonBoxConstraint);
    }
    if bounds
        .lower
        .iter()
        .zip(bounds.upper.iter())
        .any(|(l, u)| l > u)
    {
        return Err(SolverError::Infeasible);
    }
    let axes: Vec<Vec<f64>> = (0..n)
        .map(|i| axis_points(bounds.lower[i], bounds.upper[i], resolution))
        .collect();
    let rest: usize = axes[1..].iter().map(Vec::len).product();

    let best_per_slab = par::map_range(axes[0].len(), execution, |i0| {
        let mut k = DVector::zeros(n);
        k[0] = axes[0][i0];
        let mut best = (f64::INFINITY, k.clone());
        for flat in 0..rest {
            let mut r = flat;
            for ax in (1..n).rev() {
                let len = axes[ax].len();
                k[ax] = axes[ax][r % len];
                r /= len;
            }
            let v = ctx.value_unchecked(branch, &k);
            if v < best.0 {
                best = (v, k.clone());
            }
        }
        best
    });
    let (value, k) =
        best_per_slab
            .into_iter()
            .fold((f64::INFINITY, DVector::zeros(n)), |acc, cand| {
                if cand.0 < acc.0 {
                    cand
                } else {
                    acc
                }
            });

    let prob = Problem {
        ctx,
        branch,
        constraint,
        proj: Projector::new(constraint)?,
        scale: curvature_scale(ctx),
    };
    let mut res = prob.result(k, axes.iter().map(Vec::len).product(), true);
    res.value = value;
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScenarioSet, StageCost};
    use crate::objective::ValuePair;
    use approx::assert_abs_diff_eq;

    fn ctx2(values: ValuePair) -> ObjectiveContext {
        let dist = ScenarioSet::uniform(&[
            (0.9, vec![0.3, -0.2]),
            (-0.5, vec![-0.4, 0.5]),
            (1.1, vec![0.1, 0.6]),
        ])
        .unwrap()
        .distribution();
        let cost = StageCost::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]),
            DVector::from_vec(vec![0.1, -0.3]),
            1.0,
        )
        .unwrap();
        ObjectiveContext::new(dist, cost, values).unwrap()
    }

    #[test]
    fn unconstrained_matches_closed_form() {
        let ctx = ctx2(ValuePair::splat(1.7));
        let res = minimize(
            &ctx,
            Branch::Hat,
            &ConstraintSpec::unconstrained(2),
            &SolverConfig::default(),
        )
        .unwrap();
        let k_star = ctx.symmetric_unconstrained_minimizer(Branch::Hat).unwrap();
        assert!((res.k - k_star).norm() < 1e-9);
        assert!(res.converged);
    }

    #[test]
    fn box_solution_is_feasible_and_stationary() {
        let ctx = ctx2(ValuePair::new(2.0, 0.5));
        let c = ConstraintSpec::box_bounds(&[0.2, -0.1], &[0.6, 0.1]).unwrap();
        for branch in Branch::BOTH {
            let res = minimize(&ctx, branch, &c, &SolverConfig::default()).unwrap();
            assert!(c.contains(&res.k, 1e-12));
            assert!(res.kkt_residual < 1e-8);
            let oracle = brute_force_oracle(&ctx, branch, &c, 1e-3, Execution::Parallel).unwrap();
            assert!((oracle.k - &res.k).amax() <= 2e-3);
            assert!(res.value <= oracle.value + 1e-12);
        }
    }

    #[test]
    fn general_polytope() {
        let ctx = ctx2(ValuePair::new(1.0, 3.0));
        // K1 + K2 >= 1, K <= 2
        let c = ConstraintSpec::new(
            DMatrix::from_row_slice(3, 2, &[-1.0, -1.0, 1.0, 0.0, 0.0, 1.0]),
            DVector::from_vec(vec![-1.0, 2.0, 2.0]),
        )
        .unwrap();
        let res = minimize(&ctx, Branch::Bar, &c, &SolverConfig::default()).unwrap();
        assert!(c.contains(&res.k, 1e-9));
        assert!(res.converged);
        // perturbing along the feasible set never decreases the value
        for dk in [[0.01, 0.0], [0.0, 0.01], [-0.01, 0.01], [0.01, -0.01]] {
            let cand = &res.k + DVector::from_row_slice(&dk);
            if c.contains(&cand, 0.0) {
                assert!(ctx.eval_gbar(&cand).unwrap() >= res.value - 1e-12);
            }
        }
    }

    #[test]
    fn infeasible_is_reported() {
        let ctx = ctx2(ValuePair::splat(1.0));
        let c = ConstraintSpec::box_bounds(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(
            minimize(&ctx, Branch::Hat, &c, &SolverConfig::default()),
            Err(SolverError::Infeasible)
        );
    }

    #[test]
    fn oracle_argument_checks() {
        let ctx = ctx2(ValuePair::splat(1.0));
        let poly = ConstraintSpec::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        assert_eq!(
            brute_force_oracle(&ctx, Branch::Hat, &poly, 0.1, Execution::Sequential),
            Err(SolverError::NonBoxConstraint)
        );
        assert_eq!(
            brute_force_oracle(
                &ctx,
                Branch::Hat,
                &ConstraintSpec::nonneg(2),
                0.1,
                Execution::Sequential
            ),
            Err(SolverError::NonBoxConstraint)
        );
    }

    #[test]
    fn constant_objective_oracle() {
        let dist = ScenarioSet::uniform(&[(0.0, vec![1.0]), (0.0, vec![-1.0])])
            .unwrap()
            .distribution();
        let cost = StageCost::new(DMatrix::zeros(1, 1), DVector::zeros(1), 2.5).unwrap();
        let ctx = ObjectiveContext::new(dist, cost, ValuePair::splat(0.0)).unwrap();
        let c = ConstraintSpec::box_bounds(&[-1.0], &[1.0]).unwrap();
        let res = brute_force_oracle(&ctx, Branch::Hat, &c, 0.01, Execution::Sequential).unwrap();
        assert_abs_diff_eq!(res.value, 2.5, epsilon = 1e-15);
        assert!(c.contains(&res.k, 0.0));
    }
}
