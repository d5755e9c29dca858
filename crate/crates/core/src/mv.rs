//! Multi-period mean-variance portfolio selection without shorting.
//!
//! Wealth follows `x_{t+1} = r_t x_t + P_t' u_t` with `u_t >= 0`. For a
//! multiplier `λ` the problem embeds into the constrained LQ problem with
//! `A_t = r_t`, `B_t = P_t`, `S_t = 0`, `q_t = 0`, `q_T = 1` in the shifted
//! wealth `w_t = x_t - (x_d - λ)/γ_t`, where `γ_t = r_t ⋯ r_{T-1}`.
//! The optimal multiplier has the closed form
//! `λ* = Ḡ_0 (x_d - γ_0 x_0) / (Ḡ_0 - γ_0²)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{
    self, ConstraintSpec, CostSpec, Horizon, MarkovModel, ModelError, ProblemSpec, Realization,
    Scenario, ScenarioSet, StageCost, StochasticModel,
};
use crate::par::{self, Execution};
use crate::policy_sim::{self, Controller, Policy, PolicyError, SimConfig, SimulationResult};
use crate::riccati::{self, RiccatiError, RiccatiSolution, StageProblem};
use crate::solver::SolverConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MvError {
    #[error("target {xd} does not exceed the risk-free wealth {floor}")]
    TargetBelowRiskfree { xd: f64, floor: f64 },
    #[error("invalid market: {0}")]
    InvalidMarket(String),
    #[error("Ḡ_0 = {gbar0} is not below γ_0² = {gamma0_sq}; the multiplier is undefined")]
    DegenerateMultiplier { gbar0: f64, gamma0_sq: f64 },
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Market data. Scenario drifts `a` in `excess` are ignored; the risk-free
/// rate takes their place.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSpec {
    /// One rate shared by all periods, or one per period.
    pub riskfree: Vec<f64>,
    pub excess: StochasticModel,
    pub horizon: usize,
    pub x0: f64,
    pub xd: f64,
    /// One penalty matrix shared by all periods, or one per period.
    pub penalty: Vec<DMatrix<f64>>,
    /// Markov state at stage 0 (0-based).
    pub initial_state: usize,
}

impl MarketSpec {
    pub fn dim(&self) -> usize {
        self.excess.dim()
    }

    pub fn rate(&self, t: usize) -> f64 {
        self.riskfree[t.min(self.riskfree.len() - 1)]
    }

    pub fn penalty(&self, t: usize) -> &DMatrix<f64> {
        &self.penalty[t.min(self.penalty.len() - 1)]
    }

    /// `γ_t` for `t = 0..=T`.
    pub fn discount_factors(&self) -> Vec<f64> {
        let mut gamma = vec![1.0; self.horizon + 1];
        for t in (0..self.horizon).rev() {
            gamma[t] = gamma[t + 1] * self.rate(t);
        }
        gamma
    }

    /// Per-stage models with drift `r_t`.
    pub fn stage_models(&self) -> Result<Vec<StochasticModel>, ModelError> {
        (0..self.horizon.max(1))
            .map(|t| with_drift(&self.excess, self.rate(t)))
            .collect()
    }

    /// Per-stage costs `u'R_t u` with terminal weight 1.
    pub fn stage_costs(&self) -> Result<CostSpec, ModelError> {
        let n = self.dim();
        let stages = (0..self.horizon.max(1))
            .map(|t| StageCost::new(self.penalty(t).clone(), DVector::zeros(n), 0.0))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CostSpec {
            stages,
            terminal_q: 1.0,
        })
    }

    /// Embedded LQ problem at stage 0, used for validation.
    pub fn embedded_spec(&self) -> Result<ProblemSpec, ModelError> {
        Ok(ProblemSpec {
            model: with_drift(&self.excess, self.rate(0))?,
            costs: self.stage_costs()?,
            constraints: vec![ConstraintSpec::nonneg(self.dim())],
            horizon: Horizon::Finite(self.horizon),
            x0: self.x0,
            initial_state: self.initial_state,
        })
    }

    /// Every violated market assumption, as messages.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.horizon == 0 {
            out.push("horizon must be positive".to_string());
        }
        if self.riskfree.is_empty()
            || (self.riskfree.len() != 1 && self.riskfree.len() != self.horizon)
        {
            out.push(format!(
                "riskfree has {} entries; expected 1 or {}",
                self.riskfree.len(),
                self.horizon
            ));
        } else if let Some(r) = self.riskfree.iter().find(|&&r| !(r > 0.0)) {
            out.push(format!("risk-free rate {r} is not positive"));
        }
        if self.penalty.is_empty()
            || (self.penalty.len() != 1 && self.penalty.len() != self.horizon)
        {
            out.push(format!(
                "penalty has {} entries; expected 1 or {}",
                self.penalty.len(),
                self.horizon
            ));
        }
        if out.is_empty() {
            match self.embedded_spec() {
                Ok(spec) => out.extend(
                    model::validate(&spec)
                        .violations
                        .iter()
                        .map(|v| v.to_string()),
                ),
                Err(e) => out.push(e.to_string()),
            }
            let floor = self.discount_factors()[0] * self.x0;
            if !(self.xd > floor) {
                out.push(format!(
                    "target {} does not exceed the risk-free wealth {floor}",
                    self.xd
                ));
            }
        }
        out
    }
}

/// The same model with every drift replaced by `a`.
pub fn with_drift(model: &StochasticModel, a: f64) -> Result<StochasticModel, ModelError> {
    Ok(match model {
        StochasticModel::Iid(set) => StochasticModel::Iid(ScenarioSet::new(
            set.scenarios()
                .iter()
                .map(|s| Scenario { a, ..s.clone() })
                .collect(),
        )?),
        StochasticModel::Markov(m) => StochasticModel::Markov(MarkovModel::new(
            m.states()
                .iter()
                .map(|s| Realization { a, b: s.b.clone() })
                .collect(),
            m.transition().clone(),
        )?),
    })
}

/// Result of the embedded Riccati pass plus the multiplier for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct MvCalibration {
    pub lambda_star: f64,
    /// `γ_t` for `t = 0..=T`.
    pub gamma: Vec<f64>,
    pub x0: f64,
    pub xd: f64,
    pub initial_state: usize,
    /// `Ĝ^MV`, `Ḡ^MV` and the no-shorting gains.
    pub solution: RiccatiSolution,
    /// Wealth level `(x_d - λ*)/γ_t` at which the policy switches branch.
    pub thresholds: Vec<f64>,
    policy: Policy,
}

impl MvCalibration {
    pub fn gbar0(&self) -> f64 {
        self.solution.gbar[0][self.initial_state]
    }

    pub fn ghat0(&self) -> f64 {
        self.solution.ghat[0][self.initial_state]
    }

    /// Same gains with a new target; only the multiplier and thresholds move.
    pub fn retarget(&self, xd: f64) -> Result<MvCalibration, MvError> {
        let floor = self.gamma[0] * self.x0;
        if !(xd > floor) {
            return Err(MvError::TargetBelowRiskfree { xd, floor });
        }
        let (g, g0sq) = (self.gbar0(), self.gamma[0] * self.gamma[0]);
        if !(g < g0sq) {
            return Err(MvError::DegenerateMultiplier {
                gbar0: g,
                gamma0_sq: g0sq,
            });
        }
        let lambda = g * (xd - floor) / (g - g0sq);
        Ok(self.with_lambda(xd, lambda))
    }

    /// Policy for an arbitrary (not necessarily optimal) multiplier.
    pub fn with_lambda(&self, xd: f64, lambda: f64) -> MvCalibration {
        MvCalibration {
            lambda_star: lambda,
            xd,
            thresholds: self.gamma.iter().map(|g| (xd - lambda) / g).collect(),
            ..self.clone()
        }
    }

    /// Closed-form dual value `v(λ) = γ_0⁻² (γ_0 x_0 - x_d + λ)² G_0 - λ²`
    /// with the branch chosen by the sign of the shifted initial wealth.
    pub fn dual_value(&self, lambda: f64) -> f64 {
        let g0 = self.gamma[0];
        let shift = g0 * self.x0 - self.xd + lambda;
        let g = if shift >= 0.0 {
            self.ghat0()
        } else {
            self.gbar0()
        };
        shift * shift * g / (g0 * g0) - lambda * lambda
    }
}

impl Controller for MvCalibration {
    fn dim(&self) -> usize {
        Controller::dim(&self.policy)
    }

    fn horizon(&self) -> Option<usize> {
        Some(self.solution.horizon)
    }

    /// `u = w K̂` if `w >= 0`, `u = -w K̄` otherwise, with `w = x - threshold_t`.
    fn control(&self, t: usize, state: usize, x: f64) -> Result<DVector<f64>, PolicyError> {
        let thr = *self.thresholds.get(t).ok_or(PolicyError::StageOutOfRange {
            t,
            horizon: self.solution.horizon,
        })?;
        self.policy.control(t, state, x - thr)
    }
}

/// Optimal portfolio at stage `t`, state `state`, wealth `x`.
pub fn mv_policy(
    cal: &MvCalibration,
    t: usize,
    state: usize,
    x: f64,
) -> Result<DVector<f64>, PolicyError> {
    cal.control(t, state, x)
}

/// Runs the embedded recursion and computes `λ*` for `market.xd`.
pub fn calibrate(market: &MarketSpec, cfg: &SolverConfig) -> Result<MvCalibration, MvError> {
    let problems = market.validate();
    let gamma = market.discount_factors();
    let floor = gamma[0] * market.x0;
    if !(market.xd > floor) && market.horizon > 0 {
        return Err(MvError::TargetBelowRiskfree {
            xd: market.xd,
            floor,
        });
    }
    if !problems.is_empty() {
        return Err(MvError::InvalidMarket(problems.join("; ")));
    }
    let models = market.stage_models()?;
    let costs = market.stage_costs()?;
    let nonneg = ConstraintSpec::nonneg(market.dim());
    let stages: Vec<StageProblem> = (0..market.horizon)
        .map(|t| StageProblem {
            model: &models[t],
            cost: costs.stage(t),
            constraint: &nonneg,
        })
        .collect();
    let solution = riccati::solve_stages(&stages, 1.0, cfg)?;
    let policy = Policy::from_solution(&solution);
    let base = MvCalibration {
        lambda_star: 0.0,
        gamma,
        x0: market.x0,
        xd: market.xd,
        initial_state: market.initial_state,
        solution,
        thresholds: Vec::new(),
        policy,
    };
    base.retarget(market.xd)
}

/// Exact `E[x_T]` and `E[Σ u'Ru]` by full scenario enumeration.
pub fn exact_moments(market: &MarketSpec, cal: &MvCalibration) -> Result<(f64, f64), MvError> {
    let models = market.stage_models()?;
    let tree = policy_sim::scenario_tree(
        &models,
        cal,
        market.x0,
        market.initial_state,
        market.horizon,
    )?;
    let mean = policy_sim::layer_expectation(&tree[market.horizon], |n| n.x);
    let mut penalty = 0.0;
    for (t, layer) in tree.iter().take(market.horizon).enumerate() {
        for node in layer {
            let u = cal.control(t, node.state, node.x)?;
            penalty += node.prob * u.dot(&(market.penalty(t) * &u));
        }
    }
    Ok((mean, penalty))
}

/// Exact embedded objective `E[(x_T - x_d + λ)²] + E[Σ u'Ru] - λ²` of the
/// policy in `cal` (which may use a non-optimal multiplier).
pub fn exact_embedded_value(market: &MarketSpec, cal: &MvCalibration) -> Result<f64, MvError> {
    let models = market.stage_models()?;
    let tree = policy_sim::scenario_tree(
        &models,
        cal,
        market.x0,
        market.initial_state,
        market.horizon,
    )?;
    let shift = cal.xd - cal.lambda_star;
    let terminal = policy_sim::layer_expectation(&tree[market.horizon], |n| (n.x - shift).powi(2));
    let mut penalty = 0.0;
    for (t, layer) in tree.iter().take(market.horizon).enumerate() {
        for node in layer {
            let u = cal.control(t, node.state, node.x)?;
            penalty += node.prob * u.dot(&(market.penalty(t) * &u));
        }
    }
    Ok(terminal + penalty - cal.lambda_star * cal.lambda_star)
}

/// Monte Carlo rollout; path cost is the control penalty `Σ u'Ru`.
pub fn rollout(
    market: &MarketSpec,
    cal: &MvCalibration,
    n_paths: usize,
    seed: u64,
    execution: Execution,
    record_paths: bool,
) -> Result<SimulationResult, MvError> {
    let models = market.stage_models()?;
    let costs = market.stage_costs()?;
    let cfg = SimConfig {
        n_paths,
        steps: Some(market.horizon),
        seed,
        initial_state: market.initial_state,
        execution,
        record_paths,
    };
    Ok(policy_sim::simulate_with(
        &models, &costs, false, cal, market.x0, &cfg,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontierPoint {
    pub xd: f64,
    pub lambda_star: f64,
    /// Simulated mean terminal wealth.
    pub mean_xt: f64,
    pub mean_xt_stderr: f64,
    /// `Ḡ_0 (x_d - γ_0 x_0)² / (γ_0² - Ḡ_0)` minus the simulated penalty.
    pub var_xt: f64,
    pub penalty: f64,
    pub penalty_stderr: f64,
}

/// Efficient frontier over `targets`. Every target reuses the same random
/// streams, so differences between points are not sampling noise.
pub fn frontier(
    market: &MarketSpec,
    cal: &MvCalibration,
    targets: &[f64],
    n_paths: usize,
    seed: u64,
    execution: Execution,
) -> Result<Vec<FrontierPoint>, MvError> {
    par::map_range(targets.len(), execution, |i| {
        let xd = targets[i];
        let c = cal.retarget(xd)?;
        let sim = rollout(market, &c, n_paths, seed, execution, false)?;
        let g = c.gbar0();
        let g0 = c.gamma[0];
        let analytic = g * (xd - c.x0 * g0).powi(2) / (g0 * g0 - g);
        Ok(FrontierPoint {
            xd,
            lambda_star: c.lambda_star,
            mean_xt: sim.mean_terminal,
            mean_xt_stderr: sim.terminal_stderr,
            var_xt: analytic - sim.mean_cost,
            penalty: sim.mean_cost,
            penalty_stderr: sim.cost_stderr,
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn market(penalty: f64, horizon: usize) -> MarketSpec {
        MarketSpec {
            riskfree: vec![1.01],
            excess: StochasticModel::Iid(
                ScenarioSet::uniform(&[
                    (0.0, vec![0.10, -0.02]),
                    (0.0, vec![-0.05, 0.06]),
                    (0.0, vec![0.03, -0.08]),
                ])
                .unwrap(),
            ),
            horizon,
            x0: 1.0,
            xd: 1.1,
            penalty: vec![DMatrix::identity(2, 2) * penalty],
            initial_state: 0,
        }
    }

    #[test]
    fn lambda_back_substitution() {
        let m = market(1e-4, 2);
        let cal = calibrate(&m, &SolverConfig::default()).unwrap();
        let g = cal.gbar0();
        let g0 = cal.gamma[0];
        assert!(g < g0 * g0 && cal.ghat0() < g0 * g0);
        assert!(cal.lambda_star < 0.0);
        assert_abs_diff_eq!(
            cal.lambda_star * (g - g0 * g0),
            g * (m.xd - g0 * m.x0),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(cal.gamma[0], 1.01 * 1.01, epsilon = 1e-15);
    }

    #[test]
    fn target_at_riskfree_is_rejected() {
        let mut m = market(1e-4, 2);
        m.xd = 1.01 * 1.01;
        assert!(matches!(
            calibrate(&m, &SolverConfig::default()),
            Err(MvError::TargetBelowRiskfree { .. })
        ));
    }

    #[test]
    fn threshold_gives_zero_control_and_controls_are_nonnegative() {
        let m = market(1e-4, 2);
        let cal = calibrate(&m, &SolverConfig::default()).unwrap();
        for t in 0..2 {
            assert_eq!(
                mv_policy(&cal, t, 0, cal.thresholds[t]).unwrap(),
                DVector::zeros(2)
            );
            for x in [-5.0, 0.0, 0.9, 1.0, 1.3, 50.0] {
                assert!(mv_policy(&cal, t, 0, x).unwrap().iter().all(|&u| u >= 0.0));
            }
        }
    }

    #[test]
    fn exact_mean_hits_target() {
        let m = market(1e-4, 3);
        let cal = calibrate(&m, &SolverConfig::default()).unwrap();
        let (mean, penalty) = exact_moments(&m, &cal).unwrap();
        assert_abs_diff_eq!(mean, m.xd, epsilon = 1e-8);
        assert!(penalty > 0.0);
    }
}
