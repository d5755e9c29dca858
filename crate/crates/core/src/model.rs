//! Problem data: the distribution of the random pair `(A, B)`, stage costs,
//! the gain polyhedron `{K : H K <= d}`, and validation of the convexity
//! assumptions the solver relies on.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;

/// Eigenvalue tolerance used for every PSD / PD check.
pub const EIG_TOL: f64 = 1e-10;
/// Tolerance on probability sums.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("scenario set is empty")]
    Empty,
    #[error("unknown conditioning state {index} (model has {count} states)")]
    UnknownState { index: usize, count: usize },
    #[error("conditioning state required for a Markov model")]
    MissingState,
    #[error("gain set {{K : H K <= d}} is empty")]
    Infeasible,
}

/// One realization of `(A, B)` with its probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub a: f64,
    pub b: DVector<f64>,
    pub p: f64,
}

impl Scenario {
    pub fn new(a: f64, b: &[f64], p: f64) -> Self {
        Scenario {
            a,
            b: DVector::from_row_slice(b),
            p,
        }
    }
}

/// I.i.d. finite scenario distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    scenarios: Vec<Scenario>,
    dim: usize,
}

impl ScenarioSet {
    /// Checks shapes only; probabilistic invariants are left to [`validate`].
    pub fn new(scenarios: Vec<Scenario>) -> Result<Self, ModelError> {
        let dim = scenarios.first().ok_or(ModelError::Empty)?.b.len();
        if dim == 0 {
            return Err(ModelError::DimensionMismatch {
                what: "control dimension",
                expected: 1,
                found: 0,
            });
        }
        if let Some(s) = scenarios.iter().find(|s| s.b.len() != dim) {
            return Err(ModelError::DimensionMismatch {
                what: "scenario b vector",
                expected: dim,
                found: s.b.len(),
            });
        }
        Ok(ScenarioSet { scenarios, dim })
    }

    /// Equally likely scenarios from `(a, b)` pairs.
    pub fn uniform(pairs: &[(f64, Vec<f64>)]) -> Result<Self, ModelError> {
        let p = 1.0 / pairs.len().max(1) as f64;
        Self::new(pairs.iter().map(|(a, b)| Scenario::new(*a, b, p)).collect())
    }

    pub fn scenarios(&self) -> &[Scenario] {
        &self.scenarios
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn distribution(&self) -> Distribution {
        Distribution {
            a: self.scenarios.iter().map(|s| s.a).collect(),
            b: self.scenarios.iter().map(|s| s.b.clone()).collect(),
            p: self.scenarios.iter().map(|s| s.p).collect(),
        }
    }
}

/// A realization of `(A, B)` without a probability attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub a: f64,
    pub b: DVector<f64>,
}

/// Scenarios that transit among themselves according to a Markov chain.
///
/// State `j` at stage `t` means scenario `j` was realized at stage `t - 1`;
/// the stage-`t` pair is then drawn from row `j` of the transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovModel {
    states: Vec<Realization>,
    transition: DMatrix<f64>,
    dim: usize,
}

impl MarkovModel {
    pub fn new(states: Vec<Realization>, transition: DMatrix<f64>) -> Result<Self, ModelError> {
        let dim = states.first().ok_or(ModelError::Empty)?.b.len();
        if dim == 0 {
            return Err(ModelError::DimensionMismatch {
                what: "control dimension",
                expected: 1,
                found: 0,
            });
        }
        if let Some(s) = states.iter().find(|s| s.b.len() != dim) {
            return Err(ModelError::DimensionMismatch {
                what: "state b vector",
                expected: dim,
                found: s.b.len(),
            });
        }
        let m = states.len();
        if transition.nrows() != m || transition.ncols() != m {
            return Err(ModelError::DimensionMismatch {
                what: "transition matrix",
                expected: m,
                found: if transition.nrows() != m {
                    transition.nrows()
                } else {
                    transition.ncols()
                },
            });
        }
        Ok(MarkovModel {
            states,
            transition,
            dim,
        })
    }

    pub fn states(&self) -> &[Realization] {
        &self.states
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Conditional distribution of the next pair given current state `j`.
    pub fn distribution(&self, j: usize) -> Result<Distribution, ModelError> {
        if j >= self.states.len() {
            return Err(ModelError::UnknownState {
                index: j,
                count: self.states.len(),
            });
        }
        Ok(Distribution {
            a: self.states.iter().map(|s| s.a).collect(),
            b: self.states.iter().map(|s| s.b.clone()).collect(),
            p: self.transition.row(j).iter().copied().collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StochasticModel {
    Iid(ScenarioSet),
    Markov(MarkovModel),
}

impl StochasticModel {
    pub fn dim(&self) -> usize {
        match self {
            StochasticModel::Iid(s) => s.dim(),
            StochasticModel::Markov(m) => m.dim(),
        }
    }

    pub fn is_markov(&self) -> bool {
        matches!(self, StochasticModel::Markov(_))
    }

    /// Number of information states: 1 for i.i.d., the chain size otherwise.
    pub fn n_states(&self) -> usize {
        match self {
            StochasticModel::Iid(_) => 1,
            StochasticModel::Markov(m) => m.states.len(),
        }
    }

    /// Number of outcomes per stage.
    pub fn n_outcomes(&self) -> usize {
        match self {
            StochasticModel::Iid(s) => s.scenarios.len(),
            StochasticModel::Markov(m) => m.states.len(),
        }
    }

    /// Information state after outcome `k` is realized.
    pub fn next_state(&self, outcome: usize) -> usize {
        match self {
            StochasticModel::Iid(_) => 0,
            StochasticModel::Markov(_) => outcome,
        }
    }

    /// Distribution of the stage pair given information state `state`.
    /// I.i.d. models ignore the state (any index below 1 is accepted).
    pub fn distribution(&self, state: usize) -> Result<Distribution, ModelError> {
        match self {
            StochasticModel::Iid(s) => {
                if state != 0 {
                    return Err(ModelError::UnknownState {
                        index: state,
                        count: 1,
                    });
                }
                Ok(s.distribution())
            }
            StochasticModel::Markov(m) => m.distribution(state),
        }
    }
}

/// Exact scenario moments of a conditional distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub e_a2: f64,
    pub e_a: f64,
    pub e_b: DVector<f64>,
    pub e_btb: DMatrix<f64>,
    pub e_ab: DVector<f64>,
    pub cov_b: DMatrix<f64>,
}

/// A finite conditional distribution of `(A, B)` at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub a: Vec<f64>,
    pub b: Vec<DVector<f64>>,
    pub p: Vec<f64>,
}

impl Distribution {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.b.first().map_or(0, |b| b.len())
    }

    pub fn moments(&self) -> Moments {
        let n = self.dim();
        let mut e_a2 = 0.0;
        let mut e_a = 0.0;
        let mut e_b = DVector::zeros(n);
        let mut e_btb = DMatrix::zeros(n, n);
        let mut e_ab = DVector::zeros(n);
        for ((&a, b), &p) in self.a.iter().zip(&self.b).zip(&self.p) {
            e_a2 += p * a * a;
            e_a += p * a;
            e_b += b * p;
            e_btb += b * b.transpose() * p;
            e_ab += b * (p * a);
        }
        let cov_b = &e_btb - &e_b * e_b.transpose();
        Moments {
            e_a2,
            e_a,
            e_b,
            e_btb,
            e_ab,
            cov_b,
        }
    }
}

/// Conditional moments of `model`, given `state` for Markov models.
pub fn moments(model: &StochasticModel, state: Option<usize>) -> Result<Moments, ModelError> {
    let j = match (model, state) {
        (StochasticModel::Markov(_), None) => return Err(ModelError::MissingState),
        (_, s) => s.unwrap_or(0),
    };
    Ok(model.distribution(j)?.moments())
}

/// Per-stage penalty block `C = [[R, S], [S', q]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    pub r: DMatrix<f64>,
    pub s: DVector<f64>,
    pub q: f64,
}

impl StageCost {
    pub fn new(r: DMatrix<f64>, s: DVector<f64>, q: f64) -> Result<Self, ModelError> {
        let n = s.len();
        if r.nrows() != n || r.ncols() != n {
            return Err(ModelError::DimensionMismatch {
                what: "cost matrix R",
                expected: n,
                found: r.nrows().max(r.ncols()),
            });
        }
        Ok(StageCost { r, s, q })
    }

    pub fn zeros(n: usize) -> Self {
        StageCost {
            r: DMatrix::zeros(n, n),
            s: DVector::zeros(n),
            q: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn block(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut c = DMatrix::zeros(n + 1, n + 1);
        c.view_mut((0, 0), (n, n)).copy_from(&self.r);
        for i in 0..n {
            c[(i, n)] = self.s[i];
            c[(n, i)] = self.s[i];
        }
        c[(n, n)] = self.q;
        c
    }

    /// `(u, x)' C (u, x)`.
    pub fn quadratic(&self, u: &DVector<f64>, x: f64) -> f64 {
        u.dot(&(&self.r * u)) + 2.0 * x * self.s.dot(u) + self.q * x * x
    }
}

/// Stage costs for every stage plus the terminal weight `q_T`.
///
/// A single stage entry is shared by all stages.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub stages: Vec<StageCost>,
    pub terminal_q: f64,
}

impl CostSpec {
    pub fn stationary(stage: StageCost, terminal_q: f64) -> Self {
        CostSpec {
            stages: vec![stage],
            terminal_q,
        }
    }

    pub fn stage(&self, t: usize) -> &StageCost {
        if self.stages.len() == 1 {
            &self.stages[0]
        } else {
            &self.stages[t.min(self.stages.len() - 1)]
        }
    }
}

/// Componentwise bounds recovered from a coordinate-aligned polyhedron.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

/// Gain polyhedron `{K : H K <= d}`, the image of `H u <= d |x|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    pub h: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl ConstraintSpec {
    pub fn new(h: DMatrix<f64>, d: DVector<f64>) -> Result<Self, ModelError> {
        if h.nrows() != d.len() {
            return Err(ModelError::DimensionMismatch {
                what: "constraint rows",
                expected: h.nrows(),
                found: d.len(),
            });
        }
        Ok(ConstraintSpec { h, d })
    }

    /// `H = 0, d = 0` with a single row.
    pub fn unconstrained(n: usize) -> Self {
        ConstraintSpec {
            h: DMatrix::zeros(1, n),
            d: DVector::zeros(1),
        }
    }

    /// `lower <= K <= upper`, encoded as `[I; -I] K <= [upper; -lower]`.
    pub fn box_bounds(lower: &[f64], upper: &[f64]) -> Result<Self, ModelError> {
        if lower.len() != upper.len() {
            return Err(ModelError::DimensionMismatch {
                what: "box bounds",
                expected: lower.len(),
                found: upper.len(),
            });
        }
        let n = lower.len();
        let mut h = DMatrix::zeros(2 * n, n);
        let mut d = DVector::zeros(2 * n);
        for i in 0..n {
            h[(i, i)] = 1.0;
            d[i] = upper[i];
            h[(n + i, i)] = -1.0;
            d[n + i] = -lower[i];
        }
        Ok(ConstraintSpec { h, d })
    }

    /// `K >= 0` (`H = -I`, `d = 0`).
    pub fn nonneg(n: usize) -> Self {
        ConstraintSpec {
            h: -DMatrix::identity(n, n),
            d: DVector::zeros(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.h.nrows()
    }

    fn row_is_zero(&self, i: usize) -> bool {
        self.h.row(i).iter().all(|&v| v == 0.0)
    }

    /// True when no row restricts `K`.
    pub fn is_unconstrained(&self) -> bool {
        (0..self.n_rows()).all(|i| self.row_is_zero(i) && self.d[i] >= 0.0)
    }

    /// Rows with a nonzero `H` entry, as a reduced `(H, d)` pair.
    pub fn effective_rows(&self) -> (DMatrix<f64>, DVector<f64>) {
        let idx: Vec<usize> = (0..self.n_rows())
            .filter(|&i| !self.row_is_zero(i))
            .collect();
        let h = self.h.select_rows(idx.iter());
        let d = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.d[i]));
        (h, d)
    }

    /// Maximum violation `max_i (H K - d)_i`, clamped at zero.
    pub fn violation(&self, k: &DVector<f64>) -> f64 {
        let r = &self.h * k - &self.d;
        r.iter().copied().fold(0.0, f64::max)
    }

    pub fn contains(&self, k: &DVector<f64>, tol: f64) -> bool {
        self.violation(k) <= tol
    }

    /// Coordinate-aligned representation, if every nonzero row has a single
    /// nonzero entry. Bounds may be infinite.
    pub fn as_box(&self) -> Option<BoxBounds> {
        let n = self.dim();
        let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(n, f64::INFINITY);
        for i in 0..self.n_rows() {
            let nz: Vec<usize> = (0..n).filter(|&j| self.h[(i, j)] != 0.0).collect();
            match nz.as_slice() {
                [] => {
                    if self.d[i] < 0.0 {
                        return None;
                    }
                }
                [j] => {
                    let c = self.h[(i, *j)];
                    let bound = self.d[i] / c;
                    if c > 0.0 {
                        upper[*j] = upper[*j].min(bound);
                    } else {
                        lower[*j] = lower[*j].max(bound);
                    }
                }
                _ => return None,
            }
        }
        Some(BoxBounds { lower, upper })
    }

    /// Some point of the gain set, found as its least-norm element.
    pub fn feasible_gain(&self) -> Result<DVector<f64>, ModelError> {
        let n = self.dim();
        if (0..self.n_rows()).any(|i| self.row_is_zero(i) && self.d[i] < 0.0) {
            return Err(ModelError::Infeasible);
        }
        let (h, d) = self.effective_rows();
        if h.nrows() == 0 {
            return Ok(DVector::zeros(n));
        }
        // H K <= d  <=>  (-H) K >= -d
        let k = linalg::ldp(&(-&h), &(-&d)).ok_or(ModelError::Infeasible)?;
        let scale = 1.0 + d.amax();
        if self.violation(&k) > 1e-9 * scale {
            return Err(ModelError::Infeasible);
        }
        Ok(k)
    }

    /// True when the gain set is bounded, i.e. its recession cone
    /// `{r : H r <= 0}` is `{0}`. Equivalent to the rows of `H` positively
    /// spanning the whole space, which is checked on `+-e_i` by NNLS.
    pub fn is_bounded(&self) -> bool {
        let n = self.dim();
        let (h, _) = self.effective_rows();
        if h.nrows() == 0 {
            return false;
        }
        let ht = h.transpose();
        (0..n).all(|i| {
            [1.0, -1.0].iter().all(|&sign| {
                let mut e = DVector::zeros(n);
                e[i] = sign;
                let lambda = linalg::nnls(&ht, &e);
                (&ht * lambda - e).norm() <= 1e-9
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

/// A complete control problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub model: StochasticModel,
    pub costs: CostSpec,
    /// One entry shared by all stages, or one per stage.
    pub constraints: Vec<ConstraintSpec>,
    pub horizon: Horizon,
    pub x0: f64,
    /// Markov state at stage 0 (0-based).
    pub initial_state: usize,
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn constraint(&self, t: usize) -> &ConstraintSpec {
        if self.constraints.len() == 1 {
            &self.constraints[0]
        } else {
            &self.constraints[t.min(self.constraints.len() - 1)]
        }
    }

    pub fn horizon_len(&self) -> Option<usize> {
        match self.horizon {
            Horizon::Finite(t) => Some(t),
            Horizon::Infinite => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Dimension,
    NegativeProbability,
    ProbabilitySum,
    TransitionRow,
    CovarianceNotPositive,
    CostNotPsd,
    CostNotPd,
    NegativeTerminal,
    StageCount,
    ConstraintInfeasible,
    MarkovInfiniteHorizon,
    InitialState,
    EmptyHorizon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

/// Outcome of [`validate`]: every violated invariant plus informational notes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub notes: Vec<String>,
    /// Whether each distinct constraint's gain set is bounded.
    pub bounded: Vec<bool>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, message: String) {
        self.violations.push(Violation { kind, message });
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }
}

fn check_distribution(report: &mut ValidationReport, dist: &Distribution, label: &str) {
    if let Some((i, p)) = dist.p.iter().enumerate().find(|(_, &p)| p < 0.0) {
        report.push(
            ViolationKind::NegativeProbability,
            format!("{label}: probability {i} is {p}"),
        );
    }
    let sum: f64 = dist.p.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        report.push(
            ViolationKind::ProbabilitySum,
            format!("{label}: probabilities sum to {sum}"),
        );
    }
    let min_eig = linalg::min_eigenvalue(&dist.moments().cov_b);
    if min_eig <= EIG_TOL {
        report.push(
            ViolationKind::CovarianceNotPositive,
            format!("{label}: Cov[B] has minimum eigenvalue {min_eig:e}"),
        );
    }
}

/// Checks the model against every standing assumption and reports all
/// violations found; it never fails early.
pub fn validate(spec: &ProblemSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = spec.dim();
    let infinite = spec.horizon == Horizon::Infinite;

    match &spec.model {
        StochasticModel::Iid(set) => {
            check_distribution(&mut report, &set.distribution(), "scenario set");
        }
        StochasticModel::Markov(m) => {
            for j in 0..m.states.len() {
                let row = m.transition.row(j);
                if let Some(v) = row.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
                    report.push(
                        ViolationKind::TransitionRow,
                        format!("transition row {} has entry {v} outside [0, 1]", j + 1),
                    );
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    report.push(
                        ViolationKind::TransitionRow,
                        format!("transition row {} sums to {sum}", j + 1),
                    );
                }
                let dist = m.distribution(j).expect("row index in range");
                let min_eig = linalg::min_eigenvalue(&dist.moments().cov_b);
                if min_eig <= EIG_TOL {
                    report.push(
                        ViolationKind::CovarianceNotPositive,
                        format!(
                            "transition row {}: conditional Cov[B] has minimum eigenvalue {min_eig:e}",
                            j + 1
                        ),
                    );
                }
            }
            if infinite {
                report.push(
                    ViolationKind::MarkovInfiniteHorizon,
                    "infinite horizon requires an i.i.d. model".into(),
                );
            }
            if spec.initial_state >= m.states.len() {
                report.push(
                    ViolationKind::InitialState,
                    format!(
                        "initial state {} out of range 1..={}",
                        spec.initial_state + 1,
                        m.states.len()
                    ),
                );
            }
        }
    }

    match spec.horizon {
        Horizon::Finite(0) => report.push(ViolationKind::EmptyHorizon, "horizon T = 0".into()),
        Horizon::Finite(t) => {
            let k = spec.costs.stages.len();
            if k != 1 && k != t {
                report.push(
                    ViolationKind::StageCount,
                    format!("{k} stage costs supplied for horizon {t}"),
                );
            }
            let c = spec.constraints.len();
            if c != 1 && c != t {
                report.push(
                    ViolationKind::StageCount,
                    format!("{c} stage constraints supplied for horizon {t}"),
                );
            }
        }
        Horizon::Infinite => {
            if spec.costs.stages.len() != 1 {
                report.push(
                    ViolationKind::StageCount,
                    "infinite horizon needs a single stationary cost".into(),
                );
            }
            if spec.constraints.len() != 1 {
                report.push(
                    ViolationKind::StageCount,
                    "infinite horizon needs a single stationary constraint".into(),
                );
            }
        }
    }

    for (t, stage) in spec.costs.stages.iter().enumerate() {
        if stage.dim() != n || stage.r.nrows() != n || stage.r.ncols() != n {
            report.push(
                ViolationKind::Dimension,
                format!(
                    "stage cost {t} has dimension {} (model has {n})",
                    stage.dim()
                ),
            );
            continue;
        }
        let min_eig = linalg::min_eigenvalue(&stage.block());
        if infinite {
            if min_eig <= EIG_TOL {
                report.push(
                    ViolationKind::CostNotPd,
                    format!("stage cost {t}: C has minimum eigenvalue {min_eig:e}, need C > 0"),
                );
            }
        } else if min_eig < -EIG_TOL {
            report.push(
                ViolationKind::CostNotPsd,
                format!("stage cost {t}: C has minimum eigenvalue {min_eig:e}, need C >= 0"),
            );
        }
    }
    if spec.costs.terminal_q < 0.0 {
        report.push(
            ViolationKind::NegativeTerminal,
            format!("terminal weight q_T = {}", spec.costs.terminal_q),
        );
    }

    for (t, c) in spec.constraints.iter().enumerate() {
        if c.dim() != n {
            report.push(
                ViolationKind::Dimension,
                format!("constraint {t} has {} columns (model has {n})", c.dim()),
            );
            report.bounded.push(false);
            continue;
        }
        if c.feasible_gain().is_err() {
            report.push(
                ViolationKind::ConstraintInfeasible,
                format!("constraint {t}: gain set {{K : H K <= d}} is empty"),
            );
        }
        let bounded = c.is_bounded();
        report.bounded.push(bounded);
        report.notes.push(format!(
            "constraint {t}: gain set is {}",
            if bounded { "bounded" } else { "unbounded" }
        ));
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn example1() -> ScenarioSet {
        ScenarioSet::uniform(&[
            (-0.8, vec![-0.7]),
            (-0.4, vec![-0.6]),
            (0.2, vec![0.4]),
            (0.6, vec![0.8]),
            (0.9, vec![1.0]),
        ])
        .unwrap()
    }

    #[test]
    fn example1_moments() {
        let m = example1().distribution().moments();
        assert_abs_diff_eq!(m.e_a2, 0.402, epsilon = 1e-12);
        assert_abs_diff_eq!(m.e_a, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(m.e_b[0], 0.18, epsilon = 1e-12);
        assert_abs_diff_eq!(m.e_btb[(0, 0)], 0.53, epsilon = 1e-12);
        assert_abs_diff_eq!(m.cov_b[(0, 0)], 0.4976, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_model_has_zero_covariance() {
        let set = ScenarioSet::new(vec![Scenario::new(1.0, &[1.0], 1.0)]).unwrap();
        let m = set.distribution().moments();
        assert_eq!(m.e_a2, 1.0);
        assert_eq!(m.cov_b[(0, 0)], 0.0);
    }

    #[test]
    fn markov_requires_state() {
        let m = MarkovModel::new(
            vec![
                Realization {
                    a: 1.0,
                    b: DVector::from_vec(vec![1.0]),
                },
                Realization {
                    a: 0.0,
                    b: DVector::from_vec(vec![-1.0]),
                },
            ],
            DMatrix::from_element(2, 2, 0.5),
        )
        .unwrap();
        let model = StochasticModel::Markov(m);
        assert_eq!(moments(&model, None), Err(ModelError::MissingState));
        assert!(matches!(
            moments(&model, Some(2)),
            Err(ModelError::UnknownState { index: 2, count: 2 })
        ));
        assert!(moments(&model, Some(1)).is_ok());
    }

    #[test]
    fn feasible_gain_cases() {
        let c = ConstraintSpec::box_bounds(&[0.1; 3], &[0.5; 3]).unwrap();
        let k = c.feasible_gain().unwrap();
        assert!(c.contains(&k, 1e-12));
        assert!(c.is_bounded());

        let free = ConstraintSpec::unconstrained(2);
        assert_eq!(free.feasible_gain().unwrap(), DVector::zeros(2));
        assert!(!free.is_bounded());
        assert!(free.is_unconstrained());

        let bad = ConstraintSpec::new(
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![-1.0, 0.0]),
        )
        .unwrap();
        assert_eq!(bad.feasible_gain(), Err(ModelError::Infeasible));
    }

    #[test]
    fn nonneg_cone_is_unbounded() {
        let c = ConstraintSpec::nonneg(3);
        assert!(!c.is_bounded());
        assert_eq!(c.feasible_gain().unwrap(), DVector::zeros(3));
    }

    #[test]
    fn general_polytope_boundedness() {
        // simplex K1 + K2 <= 1, K >= 0
        let c = ConstraintSpec::new(
            DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -1.0, 0.0, 0.0, -1.0]),
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
        )
        .unwrap();
        assert!(c.is_bounded());
        assert!(c.as_box().is_none());
    }

    #[test]
    fn as_box_recovers_bounds() {
        let c = ConstraintSpec::box_bounds(&[2.0], &[3.0]).unwrap();
        let b = c.as_box().unwrap();
        assert_eq!(b.lower[0], 2.0);
        assert_eq!(b.upper[0], 3.0);
    }

    #[test]
    fn single_scenario_is_rejected() {
        let spec = ProblemSpec {
            model: StochasticModel::Iid(
                ScenarioSet::new(vec![Scenario::new(1.0, &[1.0], 1.0)]).unwrap(),
            ),
            costs: CostSpec::stationary(
                StageCost::new(DMatrix::identity(1, 1), DVector::zeros(1), 1.0).unwrap(),
                1.0,
            ),
            constraints: vec![ConstraintSpec::unconstrained(1)],
            horizon: Horizon::Finite(3),
            x0: 1.0,
            initial_state: 0,
        };
        let report = validate(&spec);
        assert!(report.has(ViolationKind::CovarianceNotPositive));
    }
}
