//! Piecewise-linear feedback policies, closed-loop Monte Carlo, exact
//! scenario-tree expectations and the one-step Lyapunov certificate.
//!
//! Every path draws from its own ChaCha8 stream (`seed`, stream = path
//! index), so a path's trajectory does not depend on how many paths are run
//! or on how they are scheduled.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{CostSpec, Distribution, ModelError, ProblemSpec, StageCost, StochasticModel};
use crate::par::{self, Execution};
use crate::riccati::{FixedPoint, RiccatiSolution};

/// Largest scenario tree (number of leaves) the exact evaluators will expand.
pub const MAX_TREE_LEAVES: usize = 390_625;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("stage {t} is outside the policy horizon {horizon}")]
    StageOutOfRange { t: usize, horizon: usize },
    #[error("state {state} out of range ({count} states)")]
    StateOutOfRange { state: usize, count: usize },
    #[error("fixed point did not converge")]
    NotConverged,
    #[error("policy has {found} controls, model has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("a stationary policy needs an explicit number of steps")]
    MissingSteps,
    #[error("scenario tree with {leaves} leaves exceeds the limit of {MAX_TREE_LEAVES}")]
    TreeTooLarge { leaves: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anything that maps `(stage, information state, x)` to a control.
pub trait Controller: Sync {
    fn dim(&self) -> usize;
    /// Number of stages covered, or `None` for a stationary rule.
    fn horizon(&self) -> Option<usize>;
    fn control(&self, t: usize, state: usize, x: f64) -> Result<DVector<f64>, PolicyError>;
}

/// `u = K̂ x` for `x >= 0`, `u = -K̄ x` for `x < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    khat: Vec<Vec<DVector<f64>>>,
    kbar: Vec<Vec<DVector<f64>>>,
    stationary: bool,
    dim: usize,
}

impl Policy {
    pub fn from_solution(sol: &RiccatiSolution) -> Self {
        let dim = sol
            .khat
            .first()
            .and_then(|r| r.first())
            .map_or(0, |k| k.len());
        Policy {
            khat: sol.khat.clone(),
            kbar: sol.kbar.clone(),
            stationary: false,
            dim,
        }
    }

    pub fn stationary(fp: &FixedPoint) -> Result<Self, PolicyError> {
        if !fp.converged {
            return Err(PolicyError::NotConverged);
        }
        Ok(Self::stationary_gains(
            fp.khat_star.clone(),
            fp.kbar_star.clone(),
        ))
    }

    /// Stationary rule from explicit gains.
    pub fn stationary_gains(khat: DVector<f64>, kbar: DVector<f64>) -> Self {
        Policy {
            dim: khat.len(),
            khat: vec![vec![khat]],
            kbar: vec![vec![kbar]],
            stationary: true,
        }
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    pub fn n_states(&self) -> usize {
        self.khat.first().map_or(1, Vec::len)
    }

    pub fn gains(
        &self,
        t: usize,
        state: usize,
    ) -> Result<(&DVector<f64>, &DVector<f64>), PolicyError> {
        let t = if self.stationary { 0 } else { t };
        if t >= self.khat.len() {
            return Err(PolicyError::StageOutOfRange {
                t,
                horizon: self.khat.len(),
            });
        }
        let count = self.khat[t].len();
        // i.i.d. policies carry one state and ignore the index
        let j = if count == 1 { 0 } else { state };
        if j >= count {
            return Err(PolicyError::StateOutOfRange { state, count });
        }
        Ok((&self.khat[t][j], &self.kbar[t][j]))
    }
}

impl Controller for Policy {
    fn dim(&self) -> usize {
        self.dim
    }

    fn horizon(&self) -> Option<usize> {
        (!self.stationary).then_some(self.khat.len())
    }

    fn control(&self, t: usize, state: usize, x: f64) -> Result<DVector<f64>, PolicyError> {
        let (kh, kb) = self.gains(t, state)?;
        Ok(if x >= 0.0 { kh * x } else { kb * (-x) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_paths: usize,
    /// Defaults to the policy horizon.
    pub steps: Option<usize>,
    pub seed: u64,
    /// Information state at stage 0 (0-based).
    pub initial_state: usize,
    pub execution: Execution,
    /// Keep full trajectories; statistics are computed either way.
    pub record_paths: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_paths: 1000,
            steps: None,
            seed: 0,
            initial_state: 0,
            execution: Execution::default(),
            record_paths: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub x: Vec<f64>,
    pub u: Vec<DVector<f64>>,
    /// Realized scenario index at each step.
    pub scenario: Vec<usize>,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageStats {
    pub t: usize,
    pub mean_x2: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub seed: u64,
    pub n_paths: usize,
    pub steps: usize,
    /// Empty unless `record_paths` was set.
    pub paths: Vec<SamplePath>,
    pub stats: Vec<StageStats>,
    pub mean_cost: f64,
    pub cost_stderr: f64,
    pub mean_terminal: f64,
    pub terminal_stderr: f64,
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(values: impl ExactSizeIterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Random stream for one path.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Inverse-CDF draw of an outcome index.
pub fn sample_outcome(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.iter().rposition(|&pk| pk > 0.0).unwrap_or(p.len() - 1)
}

fn stage_model(models: &[StochasticModel], t: usize) -> &StochasticModel {
    &models[t.min(models.len() - 1)]
}

/// Per-stage, per-state distributions, computed once.
fn distribution_table(
    models: &[StochasticModel],
    steps: usize,
) -> Result<Vec<Vec<Distribution>>, PolicyError> {
    let distinct = models.len().min(steps.max(1));
    (0..distinct)
        .map(|t| {
            let m = &models[t];
            (0..m.n_states()).map(|j| Ok(m.distribution(j)?)).collect()
        })
        .collect()
}

/// Closed-loop Monte Carlo over stage models `models` (one shared entry, or
/// one per stage).
///
/// Path cost is the sum of stage costs plus `q_T x_T²` when `terminal` is set.
pub fn simulate_with<C: Controller>(
    models: &[StochasticModel],
    costs: &CostSpec,
    terminal: bool,
    controller: &C,
    x0: f64,
    cfg: &SimConfig,
) -> Result<SimulationResult, PolicyError> {
    let steps = match (cfg.steps, controller.horizon()) {
        (Some(s), Some(h)) if s > h => {
            return Err(PolicyError::StageOutOfRange {
                t: s - 1,
                horizon: h,
            })
        }
        (Some(s), _) => s,
        (None, Some(h)) => h,
        (None, None) => return Err(PolicyError::MissingSteps),
    };
    let first = &models[0];
    if controller.dim() != first.dim() {
        return Err(PolicyError::DimensionMismatch {
            expected: first.dim(),
            found: controller.dim(),
        });
    }
    if cfg.initial_state >= first.n_states() {
        return Err(PolicyError::StateOutOfRange {
            state: cfg.initial_state,
            count: first.n_states(),
        });
    }
    let table = distribution_table(models, steps)?;

    let run = |path: usize| -> Result<SamplePath, PolicyError> {
        let mut rng = path_rng(cfg.seed, path);
        let mut x = x0;
        let mut state = cfg.initial_state;
        let mut xs = Vec::with_capacity(steps + 1);
        let mut us = Vec::with_capacity(steps);
        let mut scen = Vec::with_capacity(steps);
        let mut cost = 0.0;
        xs.push(x);
        for t in 0..steps {
            let u = controller.control(t, state, x)?;
            cost += costs.stage(t).quadratic(&u, x);
            let dist = &table[t.min(table.len() - 1)][state];
            let k = sample_outcome(&dist.p, rng.gen::<f64>());
            x = dist.a[k] * x + dist.b[k].dot(&u);
            state = stage_model(models, t).next_state(k);
            xs.push(x);
            us.push(u);
            scen.push(k);
        }
        if terminal {
            cost += costs.terminal_q * x * x;
        }
        Ok(SamplePath {
            x: xs,
            u: us,
            scenario: scen,
            cost,
        })
    };
    let paths = par::map_range(cfg.n_paths, cfg.execution, run)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let stats = (0..=steps)
        .map(|t| {
            let (mean_x2, stderr) = mean_stderr(paths.iter().map(|p| p.x[t] * p.x[t]));
            StageStats { t, mean_x2, stderr }
        })
        .collect();
    let (mean_cost, cost_stderr) = mean_stderr(paths.iter().map(|p| p.cost));
    let (mean_terminal, terminal_stderr) = mean_stderr(paths.iter().map(|p| p.x[steps]));
    Ok(SimulationResult {
        seed: cfg.seed,
        n_paths: cfg.n_paths,
        steps,
        paths: if cfg.record_paths { paths } else { Vec::new() },
        stats,
        mean_cost,
        cost_stderr,
        mean_terminal,
        terminal_stderr,
    })
}

/// Closed-loop Monte Carlo of `policy` on `spec`, starting from `spec.x0`.
pub fn simulate(
    spec: &ProblemSpec,
    policy: &Policy,
    cfg: &SimConfig,
) -> Result<SimulationResult, PolicyError> {
    simulate_with(
        std::slice::from_ref(&spec.model),
        &spec.costs,
        !policy.is_stationary(),
        policy,
        spec.x0,
        cfg,
    )
}

/// One node of an expanded scenario tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub prob: f64,
    pub x: f64,
    /// Information state at this node.
    pub state: usize,
}

/// Exhaustive expansion of all scenario paths of length `depth`; layer `t`
/// holds the nodes at stage `t`. Zero-probability branches are pruned.
pub fn scenario_tree<C: Controller>(
    models: &[StochasticModel],
    controller: &C,
    x0: f64,
    initial_state: usize,
    depth: usize,
) -> Result<Vec<Vec<TreeNode>>, PolicyError> {
    let leaves = (models[0].n_outcomes() as f64).powi(depth as i32);
    if leaves > MAX_TREE_LEAVES as f64 {
        return Err(PolicyError::TreeTooLarge { leaves });
    }
    if initial_state >= models[0].n_states() {
        return Err(PolicyError::StateOutOfRange {
            state: initial_state,
            count: models[0].n_states(),
        });
    }
    let table = distribution_table(models, depth)?;
    let mut layers = vec![vec![TreeNode {
        prob: 1.0,
        x: x0,
        state: initial_state,
    }]];
    for t in 0..depth {
        let mut next = Vec::new();
        for node in &layers[t] {
            let u = controller.control(t, node.state, node.x)?;
            let dist = &table[t.min(table.len() - 1)][node.state];
            for k in 0..dist.len() {
                if dist.p[k] == 0.0 {
                    continue;
                }
                next.push(TreeNode {
                    prob: node.prob * dist.p[k],
                    x: dist.a[k] * node.x + dist.b[k].dot(&u),
                    state: stage_model(models, t).next_state(k),
                });
            }
        }
        layers.push(next);
    }
    Ok(layers)
}

/// `E[f(node)]` over one tree layer.
pub fn layer_expectation(layer: &[TreeNode], f: impl Fn(&TreeNode) -> f64) -> f64 {
    layer.iter().map(|n| n.prob * f(n)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovCheck {
    pub t: usize,
    /// Sample mean of `x_{t+1}² G(x_{t+1}) - x_t² G(x_t) + x_t² J(x_t)`.
    pub mean: f64,
    pub stderr: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityCertificate {
    /// `(K̂*, 1)' C (K̂*, 1)`.
    pub jhat: f64,
    /// `(-K̄*, 1)' C (-K̄*, 1)`.
    pub jbar: f64,
    /// Exact one-step residual from `x = 1` by scenario enumeration.
    pub exact_residual_hat: f64,
    /// Exact one-step residual from `x = -1`.
    pub exact_residual_bar: f64,
    pub lyapunov_decrements: Vec<LyapunovCheck>,
}

/// Value-function weight `G(x)`.
pub fn branch_value(x: f64, ghat: f64, gbar: f64) -> f64 {
    if x >= 0.0 {
        ghat
    } else {
        gbar
    }
}

/// Stage cost weights `Ĵ`, `J̄` of the stationary gains.
pub fn stage_weights(cost: &StageCost, fp: &FixedPoint) -> (f64, f64) {
    (
        cost.quadratic(&fp.khat_star, 1.0),
        cost.quadratic(&fp.kbar_star, -1.0),
    )
}

/// Checks `E[x'² G(x')] - x² G(x) = -x² J(x)` for the stationary policy,
/// exactly from `x = ±1` and statistically along simulated paths.
pub fn stability_certificate(
    spec: &ProblemSpec,
    fp: &FixedPoint,
    cfg: &SimConfig,
) -> Result<StabilityCertificate, PolicyError> {
    let policy = Policy::stationary(fp)?;
    let cost = spec.costs.stage(0);
    let (jhat, jbar) = stage_weights(cost, fp);
    let (gh, gb) = (fp.ghat_star, fp.gbar_star);
    let models = std::slice::from_ref(&spec.model);

    let exact = |x0: f64| -> Result<f64, PolicyError> {
        let tree = scenario_tree(models, &policy, x0, 0, 1)?;
        let next = layer_expectation(&tree[1], |n| n.x * n.x * branch_value(n.x, gh, gb));
        let j = if x0 >= 0.0 { jhat } else { jbar };
        Ok(next - x0 * x0 * branch_value(x0, gh, gb) + x0 * x0 * j)
    };
    let exact_residual_hat = exact(1.0)?;
    let exact_residual_bar = exact(-1.0)?;

    let sim = simulate(
        spec,
        &policy,
        &SimConfig {
            record_paths: true,
            ..cfg.clone()
        },
    )?;
    let lyapunov_decrements = (0..sim.steps)
        .map(|t| {
            let d = sim.paths.iter().map(|p| {
                let (x, y) = (p.x[t], p.x[t + 1]);
                let j = if x >= 0.0 { jhat } else { jbar };
                y * y * branch_value(y, gh, gb) - x * x * branch_value(x, gh, gb) + x * x * j
            });
            let (mean, stderr) = mean_stderr(d);
            let z = if stderr > 0.0 { mean / stderr } else { 0.0 };
            LyapunovCheck { t, mean, stderr, z }
        })
        .collect();
    Ok(StabilityCertificate {
        jhat,
        jbar,
        exact_residual_hat,
        exact_residual_bar,
        lyapunov_decrements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConstraintSpec, Horizon, ScenarioSet};
    use nalgebra::DMatrix;

    fn spec(pairs: &[(f64, Vec<f64>)], x0: f64) -> ProblemSpec {
        let n = pairs[0].1.len();
        ProblemSpec {
            model: StochasticModel::Iid(ScenarioSet::uniform(pairs).unwrap()),
            costs: CostSpec::stationary(
                StageCost::new(DMatrix::identity(n, n), DVector::zeros(n), 1.0).unwrap(),
                0.0,
            ),
            constraints: vec![ConstraintSpec::unconstrained(n)],
            horizon: Horizon::Infinite,
            x0,
            initial_state: 0,
        }
    }

    #[test]
    fn control_rule_and_origin() {
        let p = Policy::stationary_gains(
            DVector::from_vec(vec![0.2, 0.1]),
            DVector::from_vec(vec![0.1, 0.5]),
        );
        assert_eq!(p.control(7, 0, 0.0).unwrap(), DVector::zeros(2));
        assert_eq!(
            p.control(0, 0, 2.0).unwrap(),
            DVector::from_vec(vec![0.4, 0.2])
        );
        assert_eq!(
            p.control(0, 0, -1.0).unwrap(),
            DVector::from_vec(vec![0.1, 0.5])
        );
    }

    #[test]
    fn deterministic_decay_is_exact() {
        let s = spec(&[(0.5, vec![0.0])], 3.0);
        let p =
            Policy::stationary_gains(DVector::from_vec(vec![0.7]), DVector::from_vec(vec![0.2]));
        let cfg = SimConfig {
            n_paths: 4,
            steps: Some(6),
            ..SimConfig::default()
        };
        let r = simulate(&s, &p, &cfg).unwrap();
        for path in &r.paths {
            for (t, x) in path.x.iter().enumerate() {
                assert_eq!(*x, 0.5f64.powi(t as i32) * 3.0);
            }
        }
    }

    #[test]
    fn zero_start_stays_zero() {
        let s = spec(&[(1.5, vec![1.0]), (-0.4, vec![-2.0])], 0.0);
        let p =
            Policy::stationary_gains(DVector::from_vec(vec![0.7]), DVector::from_vec(vec![0.2]));
        let r = simulate(
            &s,
            &p,
            &SimConfig {
                n_paths: 10,
                steps: Some(5),
                ..SimConfig::default()
            },
        )
        .unwrap();
        assert!(r.paths.iter().all(|p| p.x.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn paths_do_not_depend_on_batch_size() {
        let s = spec(
            &[(1.1, vec![1.0]), (-0.4, vec![-2.0]), (0.3, vec![0.5])],
            1.0,
        );
        let p =
            Policy::stationary_gains(DVector::from_vec(vec![-0.3]), DVector::from_vec(vec![0.2]));
        let small = simulate(
            &s,
            &p,
            &SimConfig {
                n_paths: 3,
                steps: Some(8),
                seed: 9,
                ..SimConfig::default()
            },
        )
        .unwrap();
        let big = simulate(
            &s,
            &p,
            &SimConfig {
                n_paths: 50,
                steps: Some(8),
                seed: 9,
                execution: Execution::Sequential,
                ..SimConfig::default()
            },
        )
        .unwrap();
        assert_eq!(small.paths[..], big.paths[..3]);
    }

    #[test]
    fn sampling_respects_cdf() {
        let p = [0.2, 0.0, 0.8];
        assert_eq!(sample_outcome(&p, 0.0), 0);
        assert_eq!(sample_outcome(&p, 0.2), 2);
        assert_eq!(sample_outcome(&p, 0.9999999), 2);
        assert_eq!(sample_outcome(&[0.5, 0.5, 0.0], 1.0), 1);
    }

    #[test]
    fn tree_probabilities_sum_to_one() {
        let s = spec(
            &[(1.1, vec![1.0]), (-0.4, vec![-2.0]), (0.3, vec![0.5])],
            1.0,
        );
        let p =
            Policy::stationary_gains(DVector::from_vec(vec![-0.3]), DVector::from_vec(vec![0.2]));
        let tree = scenario_tree(std::slice::from_ref(&s.model), &p, 1.0, 0, 4).unwrap();
        assert_eq!(tree[4].len(), 81);
        assert!((layer_expectation(&tree[4], |_| 1.0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn finite_policy_bounds() {
        let p = Policy {
            khat: vec![vec![DVector::zeros(1)]; 2],
            kbar: vec![vec![DVector::zeros(1)]; 2],
            stationary: false,
            dim: 1,
        };
        assert_eq!(
            p.control(2, 0, 1.0),
            Err(PolicyError::StageOutOfRange { t: 2, horizon: 2 })
        );
    }
}
