//! Extended Riccati recursions.
//!
//! The value function of the constrained problem is `x² Ĝ_t` on `x >= 0` and
//! `x² Ḡ_t` on `x < 0`. [`solve_finite`] runs the coupled backward recursion,
//! [`solve_infinite`] iterates the stationary map from zero, and
//! [`solve_unconstrained`] evaluates the classical single-sequence recursion
//! that the pair collapses to when no constraint is active.
//!
//! For Markov models the information state `j` at stage `t` is the index of
//! the previously realized scenario: the stage distribution is row `j` of the
//! transition matrix, and outcome `k` continues with the stage-`t+1` values of
//! state `k`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;
use crate::model::{
    moments, ConstraintSpec, Horizon, ModelError, ProblemSpec, StageCost, StochasticModel,
};
use crate::objective::{Branch, ObjectiveContext, ObjectiveError, ValuePair};
use crate::par;
use crate::solver::{self, SolverConfig, SolverError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("{op} needs a finite horizon")]
    NotFinite { op: &'static str },
    #[error("infinite-horizon iteration supports i.i.d. models only")]
    MarkovInfinite,
    #[error("{op} supports i.i.d. models only")]
    NotIid { op: &'static str },
    #[error("stage models disagree on the number of states ({expected} vs {found})")]
    StateCountMismatch { expected: usize, found: usize },
    #[error("closed-form recursion requires an unconstrained problem")]
    NotUnconstrained,
    #[error("stage matrix R + E[G B'B] is singular at t = {t}, state {state}")]
    SingularStageMatrix { t: usize, state: usize },
    #[error("vertex enumeration limited to n <= 4 and m <= 16 (got n = {n}, m = {m}); supply a bound on |K|")]
    VertexEnumerationTooLarge { n: usize, m: usize },
    #[error("stage {t}, state {state}, {branch:?} branch: {source}")]
    Solver {
        t: usize,
        state: usize,
        branch: Branch,
        #[source]
        source: SolverError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Value coefficients and gains, indexed `[t][state]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub horizon: usize,
    pub n_states: usize,
    /// `T + 1` rows; the last row is the terminal weight.
    pub ghat: Vec<Vec<f64>>,
    pub gbar: Vec<Vec<f64>>,
    /// `T` rows.
    pub khat: Vec<Vec<DVector<f64>>>,
    pub kbar: Vec<Vec<DVector<f64>>>,
}

impl RiccatiSolution {
    /// Optimal cost-to-go `x² Ĝ_t(j)` or `x² Ḡ_t(j)`.
    pub fn value(&self, t: usize, state: usize, x: f64) -> f64 {
        let g = if x >= 0.0 {
            self.ghat[t][state]
        } else {
            self.gbar[t][state]
        };
        x * x * g
    }
}

/// Builds the stage objective for information state `state` given next-stage
/// value coefficients indexed by state.
pub fn stage_context(
    model: &StochasticModel,
    cost: &StageCost,
    state: usize,
    next_ghat: &[f64],
    next_gbar: &[f64],
) -> Result<ObjectiveContext, RiccatiError> {
    let dist = model.distribution(state)?;
    let values = (0..dist.len())
        .map(|k| {
            let s = model.next_state(k);
            ValuePair::new(next_ghat[s], next_gbar[s])
        })
        .collect();
    Ok(ObjectiveContext::with_outcome_values(
        dist,
        cost.clone(),
        values,
    )?)
}

/// Data for one stage of a possibly time-varying problem.
#[derive(Debug, Clone, Copy)]
pub struct StageProblem<'a> {
    pub model: &'a StochasticModel,
    pub cost: &'a StageCost,
    pub constraint: &'a ConstraintSpec,
}

/// Coupled backward recursion over a finite horizon.
pub fn solve_finite(
    spec: &ProblemSpec,
    cfg: &SolverConfig,
) -> Result<RiccatiSolution, RiccatiError> {
    let horizon = match spec.horizon {
        Horizon::Finite(t) => t,
        Horizon::Infinite => return Err(RiccatiError::NotFinite { op: "solve_finite" }),
    };
    let stages: Vec<StageProblem> = (0..horizon)
        .map(|t| StageProblem {
            model: &spec.model,
            cost: spec.costs.stage(t),
            constraint: spec.constraint(t),
        })
        .collect();
    solve_stages(&stages, spec.costs.terminal_q, cfg)
}

/// Backward recursion over explicitly listed stages; the horizon is `stages.len()`.
///
/// Every stage model must have the same number of information states.
pub fn solve_stages(
    stages: &[StageProblem<'_>],
    terminal_q: f64,
    cfg: &SolverConfig,
) -> Result<RiccatiSolution, RiccatiError> {
    let horizon = stages.len();
    let m = stages.first().map_or(1, |s| s.model.n_states());
    if let Some(s) = stages.iter().find(|s| s.model.n_states() != m) {
        return Err(RiccatiError::StateCountMismatch {
            expected: m,
            found: s.model.n_states(),
        });
    }
    let mut ghat = vec![vec![0.0; m]; horizon + 1];
    let mut gbar = vec![vec![0.0; m]; horizon + 1];
    let mut khat = vec![Vec::new(); horizon];
    let mut kbar = vec![Vec::new(); horizon];
    ghat[horizon] = vec![terminal_q; m];
    gbar[horizon] = vec![terminal_q; m];

    for t in (0..horizon).rev() {
        let stage = stages[t];
        let (next_hat, next_bar) = (&ghat[t + 1], &gbar[t + 1]);
        let results = par::map_range(2 * m, cfg.execution, |job| {
            let (state, branch) = (job / 2, Branch::BOTH[job % 2]);
            let ctx = stage_context(stage.model, stage.cost, state, next_hat, next_bar)?;
            solver::minimize(&ctx, branch, stage.constraint, cfg).map_err(|source| {
                RiccatiError::Solver {
                    t,
                    state,
                    branch,
                    source,
                }
            })
        });
        let mut row_kh = Vec::with_capacity(m);
        let mut row_kb = Vec::with_capacity(m);
        for (job, res) in results.into_iter().enumerate() {
            let res = res?;
            let state = job / 2;
            if job % 2 == 0 {
                ghat[t][state] = res.value;
                row_kh.push(res.k);
            } else {
                gbar[t][state] = res.value;
                row_kb.push(res.k);
            }
        }
        khat[t] = row_kh;
        kbar[t] = row_kb;
    }
    Ok(RiccatiSolution {
        horizon,
        n_states: m,
        ghat,
        gbar,
        khat,
        kbar,
    })
}

/// Classical recursion for the unconstrained problem:
/// `G_t = q + E[G A²] - (S + E[G A B])' (R + E[G B'B])⁻¹ (S + E[G A B])`.
pub fn solve_unconstrained(spec: &ProblemSpec) -> Result<RiccatiSolution, RiccatiError> {
    let horizon = match spec.horizon {
        Horizon::Finite(t) => t,
        Horizon::Infinite => {
            return Err(RiccatiError::NotFinite {
                op: "solve_unconstrained",
            })
        }
    };
    if spec.constraints.iter().any(|c| !c.is_unconstrained()) {
        return Err(RiccatiError::NotUnconstrained);
    }
    let m = spec.model.n_states();
    let n = spec.dim();
    let mut g = vec![vec![0.0; m]; horizon + 1];
    g[horizon] = vec![spec.costs.terminal_q; m];
    let mut k = vec![Vec::new(); horizon];

    for t in (0..horizon).rev() {
        let cost = spec.costs.stage(t);
        let mut row = Vec::with_capacity(m);
        for j in 0..m {
            let dist = spec.model.distribution(j)?;
            let mut e_ga2 = 0.0;
            let mut e_gab = DVector::zeros(n);
            let mut e_gbb = DMatrix::zeros(n, n);
            for i in 0..dist.len() {
                let w = dist.p[i] * g[t + 1][spec.model.next_state(i)];
                let (a, b) = (dist.a[i], &dist.b[i]);
                e_ga2 += w * a * a;
                e_gab += b * (w * a);
                e_gbb += b * b.transpose() * w;
            }
            let lhs = &cost.r + e_gbb;
            let rhs = &cost.s + e_gab;
            let sol = match lhs.clone().cholesky() {
                Some(chol) => chol.solve(&rhs),
                None => {
                    // Semidefinite: fine as long as the stationarity system is consistent.
                    let sol = linalg::lstsq(&lhs, &rhs);
                    if (&lhs * &sol - &rhs).norm() > 1e-10 * (1.0 + rhs.norm()) {
                        return Err(RiccatiError::SingularStageMatrix { t, state: j });
                    }
                    sol
                }
            };
            g[t][j] = cost.q + e_ga2 - rhs.dot(&sol);
            row.push(-sol);
        }
        k[t] = row;
    }
    let kbar = k
        .iter()
        .map(|row| row.iter().map(|v| -v).collect())
        .collect();
    Ok(RiccatiSolution {
        horizon,
        n_states: m,
        ghat: g.clone(),
        gbar: g,
        khat: k,
        kbar,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfiniteConfig {
    pub solver: SolverConfig,
    /// Stop when both successive differences are at most this.
    pub eps: f64,
    pub i_max: usize,
    /// Iterates beyond this are declared divergent.
    pub ceiling: f64,
    /// Relative per-iteration growth at `i_max` that still counts as divergence.
    pub growth_tol: f64,
}

impl Default for InfiniteConfig {
    fn default() -> Self {
        InfiniteConfig {
            solver: SolverConfig::default(),
            eps: 1e-8,
            i_max: 10_000,
            ceiling: 1e10,
            growth_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub ghat_star: f64,
    pub gbar_star: f64,
    pub khat_star: DVector<f64>,
    pub kbar_star: DVector<f64>,
    /// `(Ĝ_i, Ḡ_i)` for `i = 0, 1, ...`, starting from `(0, 0)`.
    pub iterates: Vec<(f64, f64)>,
    pub converged: bool,
    pub diverged: bool,
}

fn stationary_step(
    spec: &ProblemSpec,
    constraint: &ConstraintSpec,
    y: f64,
    z: f64,
    cfg: &SolverConfig,
    iteration: usize,
) -> Result<[(f64, DVector<f64>); 2], RiccatiError> {
    let ctx = stage_context(&spec.model, spec.costs.stage(0), 0, &[y], &[z])?;
    let res = par::map_range(2, cfg.execution, |b| {
        let branch = Branch::BOTH[b];
        solver::minimize(&ctx, branch, constraint, cfg)
            .map(|r| (r.value, r.k))
            .map_err(|source| RiccatiError::Solver {
                t: iteration,
                state: 0,
                branch,
                source,
            })
    });
    let mut it = res.into_iter();
    Ok([it.next().unwrap()?, it.next().unwrap()?])
}

/// Fixed-point iteration `(Ĝ, Ḡ) ← (min ĝ(·, Ĝ, Ḡ), min ḡ(·, Ĝ, Ḡ))` from zero.
pub fn solve_infinite(
    spec: &ProblemSpec,
    cfg: &InfiniteConfig,
) -> Result<FixedPoint, RiccatiError> {
    if spec.model.is_markov() {
        return Err(RiccatiError::MarkovInfinite);
    }
    let constraint = spec.constraint(0);
    let (mut y, mut z) = (0.0_f64, 0.0_f64);
    let mut iterates = vec![(y, z)];
    let mut converged = false;
    let mut diverged = false;
    let mut gains = (DVector::zeros(spec.dim()), DVector::zeros(spec.dim()));

    for i in 0..cfg.i_max {
        let [(gh, kh), (gb, kb)] = stationary_step(spec, constraint, y, z, &cfg.solver, i)?;
        let (dy, dz) = ((gh - y).abs(), (gb - z).abs());
        let growth = ((gh - y) / y.max(f64::MIN_POSITIVE)).min((gb - z) / z.max(f64::MIN_POSITIVE));
        y = gh;
        z = gb;
        gains = (kh, kb);
        iterates.push((y, z));
        if dy <= cfg.eps && dz <= cfg.eps {
            converged = true;
            break;
        }
        if y.min(z) > cfg.ceiling {
            diverged = true;
            break;
        }
        if i + 1 == cfg.i_max && growth >= cfg.growth_tol {
            diverged = true;
        }
    }
    if converged {
        let [(_, kh), (_, kb)] =
            stationary_step(spec, constraint, y, z, &cfg.solver, iterates.len())?;
        gains = (kh, kb);
    }
    Ok(FixedPoint {
        ghat_star: y,
        gbar_star: z,
        khat_star: gains.0,
        kbar_star: gains.1,
        iterates,
        converged,
        diverged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KMax {
    /// Largest vertex norm of the gain polytope.
    Enumerated(f64),
    UserSupplied(f64),
    Unbounded,
}

impl KMax {
    pub fn value(self) -> Option<f64> {
        match self {
            KMax::Enumerated(v) | KMax::UserSupplied(v) => Some(v),
            KMax::Unbounded => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdVerdict {
    /// `E[A²] + η K_max < 1`: a stationary solution exists.
    SufficientHolds,
    /// The sufficient test fails or cannot be evaluated; nothing follows.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdReport {
    /// `E[A²] - (E[A] E[B])² / E[B²]`, scalar control only.
    pub classical_threshold: Option<f64>,
    pub e_a2: f64,
    /// Largest eigenvalue of `E[B'B]`.
    pub eta: f64,
    pub k_max: KMax,
    pub sufficient_lhs: Option<f64>,
    pub verdict: ThresholdVerdict,
}

const VERTEX_MAX_DIM: usize = 4;
const VERTEX_MAX_ROWS: usize = 16;

fn combinations(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    if k > m {
        return out;
    }
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + m - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Largest Euclidean norm over the vertices of a bounded `{K : H K <= d}`.
pub fn max_vertex_norm(constraint: &ConstraintSpec) -> Result<f64, RiccatiError> {
    let (h, d) = constraint.effective_rows();
    let (m, n) = (h.nrows(), h.ncols());
    if n > VERTEX_MAX_DIM || m > VERTEX_MAX_ROWS {
        return Err(RiccatiError::VertexEnumerationTooLarge { n, m });
    }
    let tol = 1e-9 * (1.0 + d.amax());
    let mut best: f64 = 0.0;
    for rows in combinations(m, n) {
        let hs = h.select_rows(rows.iter());
        let ds = DVector::from_iterator(n, rows.iter().map(|&i| d[i]));
        let svd = hs.clone().svd(false, false);
        if svd.singular_values.min() <= 1e-12 * svd.singular_values.max().max(1.0) {
            continue;
        }
        let v = linalg::lstsq(&hs, &ds);
        if constraint.contains(&v, tol) {
            best = best.max(v.norm());
        }
    }
    Ok(best)
}

/// Classical and sufficient existence tests for the stationary problem.
///
/// `k_bound` is used when the gain set is bounded but too large to enumerate.
pub fn check_threshold(
    spec: &ProblemSpec,
    k_bound: Option<f64>,
) -> Result<ThresholdReport, RiccatiError> {
    if spec.model.is_markov() {
        return Err(RiccatiError::NotIid {
            op: "check_threshold",
        });
    }
    let mo = moments(&spec.model, None)?;
    let classical_threshold = (spec.dim() == 1).then(|| {
        let e_b2 = mo.e_btb[(0, 0)];
        mo.e_a2 - (mo.e_a * mo.e_b[0]).powi(2) / e_b2
    });
    let eta = linalg::max_eigenvalue(&mo.e_btb);
    let constraint = spec.constraint(0);
    let k_max = if !constraint.is_bounded() {
        KMax::Unbounded
    } else {
        match max_vertex_norm(constraint) {
            Ok(v) => KMax::Enumerated(v),
            Err(e @ RiccatiError::VertexEnumerationTooLarge { .. }) => match k_bound {
                Some(b) => KMax::UserSupplied(b),
                None => return Err(e),
            },
            Err(e) => return Err(e),
        }
    };
    let sufficient_lhs = k_max.value().map(|k| mo.e_a2 + eta * k);
    let verdict = match sufficient_lhs {
        Some(v) if v < 1.0 => ThresholdVerdict::SufficientHolds,
        _ => ThresholdVerdict::Inconclusive,
    };
    Ok(ThresholdReport {
        classical_threshold,
        e_a2: mo.e_a2,
        eta,
        k_max,
        sufficient_lhs,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostSpec, ScenarioSet};
    use approx::assert_abs_diff_eq;

    fn scalar_spec(
        a: f64,
        b: f64,
        r: f64,
        q: f64,
        q_t: f64,
        horizon: Horizon,
        c: ConstraintSpec,
    ) -> ProblemSpec {
        ProblemSpec {
            model: StochasticModel::Iid(ScenarioSet::uniform(&[(a, vec![b])]).unwrap()),
            costs: CostSpec::stationary(
                StageCost::new(DMatrix::from_element(1, 1, r), DVector::zeros(1), q).unwrap(),
                q_t,
            ),
            constraints: vec![c],
            horizon,
            x0: 1.0,
            initial_state: 0,
        }
    }

    #[test]
    fn one_step_closed_form() {
        let spec = scalar_spec(
            1.0,
            1.0,
            1.0,
            0.0,
            1.0,
            Horizon::Finite(1),
            ConstraintSpec::unconstrained(1),
        );
        let sol = solve_unconstrained(&spec).unwrap();
        assert_abs_diff_eq!(sol.ghat[0][0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.khat[0][0][0], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.kbar[0][0][0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn one_step_constrained_matches_formula_when_inactive() {
        let (a, b, r) = (0.8, 1.3, 0.4);
        let spec = scalar_spec(
            a,
            b,
            r,
            0.7,
            1.0,
            Horizon::Finite(1),
            ConstraintSpec::unconstrained(1),
        );
        let sol = solve_finite(&spec, &SolverConfig::default()).unwrap();
        let expect = 0.7 + a * a - (a * b).powi(2) / (r + b * b);
        assert_abs_diff_eq!(sol.ghat[0][0], expect, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.gbar[0][0], expect, epsilon = 1e-10);
    }

    #[test]
    fn zero_costs_give_zero_values() {
        let spec = scalar_spec(
            1.0,
            1.0,
            0.0,
            0.0,
            0.0,
            Horizon::Finite(3),
            ConstraintSpec::unconstrained(1),
        );
        let sol = solve_unconstrained(&spec).unwrap();
        for t in 0..3 {
            assert_eq!(sol.ghat[t][0], 0.0);
            assert_eq!(sol.khat[t][0][0], 0.0);
        }
    }

    #[test]
    fn inconsistent_stage_system_is_singular() {
        let mut spec = scalar_spec(
            1.0,
            1.0,
            0.0,
            0.0,
            0.0,
            Horizon::Finite(2),
            ConstraintSpec::unconstrained(1),
        );
        spec.costs.stages[0].s[0] = 1.0;
        assert!(matches!(
            solve_unconstrained(&spec),
            Err(RiccatiError::SingularStageMatrix { t: 1, state: 0 })
        ));
    }

    #[test]
    fn terminal_row_is_exact() {
        let c = ConstraintSpec::box_bounds(&[0.1], &[0.3]).unwrap();
        let spec = scalar_spec(0.9, 0.5, 0.2, 0.3, 1.7, Horizon::Finite(4), c.clone());
        let sol = solve_finite(&spec, &SolverConfig::default()).unwrap();
        assert_eq!(sol.ghat[4][0], 1.7);
        assert_eq!(sol.gbar[4][0], 1.7);
        for t in 0..4 {
            assert!(c.contains(&sol.khat[t][0], 1e-12) && c.contains(&sol.kbar[t][0], 1e-12));
            assert!(sol.ghat[t][0] >= 0.0 && sol.gbar[t][0] >= 0.0);
        }
    }

    #[test]
    fn degenerate_gain_set_threshold() {
        let c = ConstraintSpec::box_bounds(&[0.0], &[0.0]).unwrap();
        let spec = scalar_spec(0.6, 1.0, 1.0, 1.0, 0.0, Horizon::Infinite, c);
        let rep = check_threshold(&spec, None).unwrap();
        assert_eq!(rep.k_max, KMax::Enumerated(0.0));
        assert_abs_diff_eq!(rep.sufficient_lhs.unwrap(), 0.36, epsilon = 1e-15);
        assert_eq!(rep.verdict, ThresholdVerdict::SufficientHolds);
    }

    #[test]
    fn unbounded_gain_set_is_inconclusive() {
        let spec = scalar_spec(
            0.6,
            1.0,
            1.0,
            1.0,
            0.0,
            Horizon::Infinite,
            ConstraintSpec::nonneg(1),
        );
        let rep = check_threshold(&spec, None).unwrap();
        assert_eq!(rep.k_max, KMax::Unbounded);
        assert_eq!(rep.verdict, ThresholdVerdict::Inconclusive);
    }

    #[test]
    fn vertex_enumeration_limits() {
        let n = 5;
        let c = ConstraintSpec::box_bounds(&vec![0.0; n], &vec![1.0; n]).unwrap();
        assert!(matches!(
            max_vertex_norm(&c),
            Err(RiccatiError::VertexEnumerationTooLarge { n: 5, .. })
        ));
        let c = ConstraintSpec::box_bounds(&[-1.0, 0.0], &[2.0, 1.0]).unwrap();
        assert_abs_diff_eq!(max_vertex_norm(&c).unwrap(), 5f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(6, 3).len(), 20);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert!(combinations(2, 3).is_empty());
    }

    #[test]
    fn stable_scalar_fixed_point() {
        let spec = scalar_spec(
            0.5,
            1.0,
            1.0,
            1.0,
            0.0,
            Horizon::Infinite,
            ConstraintSpec::unconstrained(1),
        );
        let fp = solve_infinite(&spec, &InfiniteConfig::default()).unwrap();
        assert!(fp.converged && !fp.diverged);
        // scalar ARE: G = 1 + a² G - (a b G)² / (1 + b² G)
        let g = fp.ghat_star;
        assert_abs_diff_eq!(
            g,
            1.0 + 0.25 * g - (0.5 * g).powi(2) / (1.0 + g),
            epsilon = 1e-7
        );
        assert_abs_diff_eq!(fp.gbar_star, g, epsilon = 1e-9);
        assert!(fp.iterates.windows(2).all(|w| w[1].0 >= w[0].0 - 1e-12));
    }
}
