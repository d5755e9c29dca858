//! Piecewise-quadratic stage objectives.
//!
//! For a continuation pair `(y, z)` (value coefficient on `{x' >= 0}` and on
//! `{x' < 0}`):
//!
//! ```text
//! g(u, x)  = E[ (u,x)' C (u,x) + (A x + B u)^2 (y 1{A x + B u >= 0} + z 1{A x + B u < 0}) ]
//! ĝ(K)     = E[ (K,1)' C (K,1)  + (A + B K)^2  (y 1{A + B K >= 0}  + z 1{A + B K < 0}) ]
//! ḡ(K)     = E[ (-K,1)' C (-K,1) + (A - B K)^2 (y 1{A - B K <= 0}  + z 1{A - B K > 0}) ]
//! ```
//!
//! `ĝ` governs states `x >= 0` under `u = K x`, `ḡ` governs `x < 0` under
//! `u = -K x`; in both cases `y` weights outcomes where the next state is
//! nonnegative. With a Markov model the continuation pair may differ per
//! outcome, so the context stores one [`ValuePair`] per scenario.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{Distribution, StageCost};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("dimension mismatch: expected {expected} controls, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("expected {expected} continuation pairs, found {found}")]
    ValueCount { expected: usize, found: usize },
    #[error("continuation values must be nonnegative (got y = {y}, z = {z})")]
    NegativeValue { y: f64, z: f64 },
}

/// Which half-line objective: `ĝ` (states `x >= 0`) or `ḡ` (states `x < 0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Hat,
    Bar,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Hat, Branch::Bar];
}

/// Continuation value coefficients `(y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValuePair {
    pub y: f64,
    pub z: f64,
}

impl ValuePair {
    pub fn new(y: f64, z: f64) -> Self {
        ValuePair { y, z }
    }

    pub fn splat(v: f64) -> Self {
        ValuePair { y: v, z: v }
    }
}

/// Everything needed to evaluate one stage objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveContext {
    pub dist: Distribution,
    pub cost: StageCost,
    values: Vec<ValuePair>,
}

impl ObjectiveContext {
    /// Same continuation pair for every outcome.
    pub fn new(
        dist: Distribution,
        cost: StageCost,
        values: ValuePair,
    ) -> Result<Self, ObjectiveError> {
        let count = dist.len();
        Self::with_outcome_values(dist, cost, vec![values; count])
    }

    /// One continuation pair per outcome (Markov recursion).
    pub fn with_outcome_values(
        dist: Distribution,
        cost: StageCost,
        values: Vec<ValuePair>,
    ) -> Result<Self, ObjectiveError> {
        if values.len() != dist.len() {
            return Err(ObjectiveError::ValueCount {
                expected: dist.len(),
                found: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !(v.y >= 0.0 && v.z >= 0.0)) {
            return Err(ObjectiveError::NegativeValue { y: v.y, z: v.z });
        }
        let n = dist.dim();
        if cost.dim() != n {
            return Err(ObjectiveError::DimensionMismatch {
                expected: n,
                found: cost.dim(),
            });
        }
        Ok(ObjectiveContext { dist, cost, values })
    }

    pub fn dim(&self) -> usize {
        self.cost.dim()
    }

    pub fn values(&self) -> &[ValuePair] {
        &self.values
    }

    /// Largest continuation coefficient appearing in the context.
    pub fn max_value(&self) -> f64 {
        self.values.iter().map(|v| v.y.max(v.z)).fold(0.0, f64::max)
    }

    fn check(&self, k: &DVector<f64>) -> Result<(), ObjectiveError> {
        if k.len() != self.dim() {
            return Err(ObjectiveError::DimensionMismatch {
                expected: self.dim(),
                found: k.len(),
            });
        }
        Ok(())
    }

    /// The same context with every scenario's `(a, b)` negated.
    pub fn sign_flipped(&self) -> Self {
        let mut dist = self.dist.clone();
        dist.a.iter_mut().for_each(|a| *a = -*a);
        dist.b.iter_mut().for_each(|b| *b = -b.clone());
        ObjectiveContext {
            dist,
            cost: self.cost.clone(),
            values: self.values.clone(),
        }
    }

    /// `g(u, x)`.
    pub fn eval_g(&self, u: &DVector<f64>, x: f64) -> Result<f64, ObjectiveError> {
        self.check(u)?;
        let mut total = self.cost.quadratic(u, x);
        for (k, v) in self.values.iter().enumerate() {
            let s = self.dist.a[k] * x + self.dist.b[k].dot(u);
            let w = if s >= 0.0 { v.y } else { v.z };
            total += self.dist.p[k] * s * s * w;
        }
        Ok(total)
    }

    pub fn eval_ghat(&self, k: &DVector<f64>) -> Result<f64, ObjectiveError> {
        self.eval(Branch::Hat, k)
    }

    pub fn eval_gbar(&self, k: &DVector<f64>) -> Result<f64, ObjectiveError> {
        self.eval(Branch::Bar, k)
    }

    pub fn grad_ghat(&self, k: &DVector<f64>) -> Result<DVector<f64>, ObjectiveError> {
        self.grad(Branch::Hat, k)
    }

    pub fn grad_gbar(&self, k: &DVector<f64>) -> Result<DVector<f64>, ObjectiveError> {
        self.grad(Branch::Bar, k)
    }

    pub fn eval(&self, branch: Branch, k: &DVector<f64>) -> Result<f64, ObjectiveError> {
        self.check(k)?;
        Ok(self.value_unchecked(branch, k))
    }

    /// Exact gradient; at a kink the boundary scenario uses the `y` branch.
    pub fn grad(&self, branch: Branch, k: &DVector<f64>) -> Result<DVector<f64>, ObjectiveError> {
        self.check(k)?;
        Ok(self.grad_unchecked(branch, k))
    }

    /// Hessian of the quadratic piece active at `k`.
    pub fn region_hessian(
        &self,
        branch: Branch,
        k: &DVector<f64>,
    ) -> Result<DMatrix<f64>, ObjectiveError> {
        self.check(k)?;
        Ok(self.hessian_unchecked(branch, k))
    }

    /// Signed next-state factor and the continuation weight it selects.
    #[inline]
    fn outcome(&self, branch: Branch, idx: usize, k: &DVector<f64>) -> (f64, f64) {
        let bk = self.dist.b[idx].dot(k);
        let v = self.values[idx];
        match branch {
            Branch::Hat => {
                let s = self.dist.a[idx] + bk;
                (s, if s >= 0.0 { v.y } else { v.z })
            }
            Branch::Bar => {
                let s = self.dist.a[idx] - bk;
                (s, if s <= 0.0 { v.y } else { v.z })
            }
        }
    }

    fn sign(branch: Branch) -> f64 {
        match branch {
            Branch::Hat => 1.0,
            Branch::Bar => -1.0,
        }
    }

    pub(crate) fn value_unchecked(&self, branch: Branch, k: &DVector<f64>) -> f64 {
        let sg = Self::sign(branch);
        let c = &self.cost;
        let mut total = k.dot(&(&c.r * k)) + 2.0 * sg * c.s.dot(k) + c.q;
        for idx in 0..self.values.len() {
            let (s, w) = self.outcome(branch, idx, k);
            total += self.dist.p[idx] * s * s * w;
        }
        total
    }

    pub(crate) fn grad_unchecked(&self, branch: Branch, k: &DVector<f64>) -> DVector<f64> {
        let sg = Self::sign(branch);
        let c = &self.cost;
        let mut g = (&c.r * k) * 2.0 + &c.s * (2.0 * sg);
        for idx in 0..self.values.len() {
            let (s, w) = self.outcome(branch, idx, k);
            g.axpy(2.0 * sg * self.dist.p[idx] * s * w, &self.dist.b[idx], 1.0);
        }
        g
    }

    pub(crate) fn hessian_unchecked(&self, branch: Branch, k: &DVector<f64>) -> DMatrix<f64> {
        let mut h = &self.cost.r * 2.0;
        for idx in 0..self.values.len() {
            let (_, w) = self.outcome(branch, idx, k);
            let b = &self.dist.b[idx];
            h += b * b.transpose() * (2.0 * self.dist.p[idx] * w);
        }
        h
    }

    /// Minimizer of the branch objective over all of `R^n` with the
    /// continuation pair of every outcome replaced by `max(y, z)`.
    /// Returns `None` when the stage matrix is singular.
    pub fn symmetric_unconstrained_minimizer(&self, branch: Branch) -> Option<DVector<f64>> {
        let n = self.dim();
        let mut m = self.cost.r.clone();
        let mut rhs = DVector::zeros(n);
        for idx in 0..self.values.len() {
            let g = self.values[idx].y.max(self.values[idx].z);
            let b = &self.dist.b[idx];
            let p = self.dist.p[idx];
            m += b * b.transpose() * (p * g);
            rhs.axpy(p * g * self.dist.a[idx], b, 1.0);
        }
        rhs += &self.cost.s;
        let sol = m.cholesky()?.solve(&rhs);
        Some(match branch {
            Branch::Hat => -sol,
            Branch::Bar => sol,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScenarioSet;
    use approx::assert_abs_diff_eq;

    fn toy() -> ObjectiveContext {
        let dist = ScenarioSet::uniform(&[(1.0, vec![1.0])])
            .unwrap()
            .distribution();
        let cost = StageCost::new(DMatrix::identity(1, 1), DVector::zeros(1), 1.0).unwrap();
        ObjectiveContext::new(dist, cost, ValuePair::new(2.0, 3.0)).unwrap()
    }

    #[test]
    fn scalar_toy_g() {
        // (u,x)'I(u,x) = 4 + 1; a x + b u = -1 < 0 -> weight z = 3
        let v = toy().eval_g(&DVector::from_vec(vec![-2.0]), 1.0).unwrap();
        assert_abs_diff_eq!(v, 8.0, epsilon = 1e-15);
    }

    #[test]
    fn scalar_toy_gradient_at_zero() {
        let g = toy().grad_ghat(&DVector::zeros(1)).unwrap();
        assert_abs_diff_eq!(g[0], 4.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_state_zero_control() {
        assert_eq!(toy().eval_g(&DVector::zeros(1), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn ghat_at_zero_gain() {
        let dist = ScenarioSet::uniform(&[(0.5, vec![1.0]), (-2.0, vec![-1.0])])
            .unwrap()
            .distribution();
        let cost = StageCost::new(DMatrix::identity(1, 1), DVector::zeros(1), 0.7).unwrap();
        let ctx = ObjectiveContext::new(dist, cost, ValuePair::new(2.0, 5.0)).unwrap();
        let v = ctx.eval_ghat(&DVector::zeros(1)).unwrap();
        assert_abs_diff_eq!(
            v,
            0.7 + 0.5 * (0.25 * 2.0) + 0.5 * (4.0 * 5.0),
            epsilon = 1e-14
        );
    }

    #[test]
    fn rejects_bad_dimensions_and_values() {
        let ctx = toy();
        assert!(matches!(
            ctx.eval_ghat(&DVector::zeros(2)),
            Err(ObjectiveError::DimensionMismatch {
                expected: 1,
                found: 2
            })
        ));
        let dist = ctx.dist.clone();
        assert!(ObjectiveContext::new(dist, ctx.cost.clone(), ValuePair::new(-1.0, 0.0)).is_err());
    }

    #[test]
    fn kink_gradient_uses_y_branch() {
        // a + bK = 0 at K = -1: boundary scenario contributes 2 b s y = 0 anyway,
        // so the (sub)gradient equals the y-branch derivative 2 R K.
        let ctx = toy();
        let g = ctx.grad_ghat(&DVector::from_vec(vec![-1.0])).unwrap();
        assert_abs_diff_eq!(g[0], -2.0, epsilon = 1e-15);
        let h = ctx
            .region_hessian(Branch::Hat, &DVector::from_vec(vec![-1.0]))
            .unwrap();
        assert_abs_diff_eq!(h[(0, 0)], 2.0 + 2.0 * 2.0, epsilon = 1e-15);
    }
}
