//! JSON problem/market files, JSON solution documents and CSV tables.
//!
//! State indices are 1-based in every file; they are converted to the
//! 0-based library convention on load and back on write.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ConstraintSpec, CostSpec, Horizon, MarkovModel, ModelError, ProblemSpec, Realization, Scenario,
    ScenarioSet, StageCost, StochasticModel,
};
use crate::mv::{FrontierPoint, MarketSpec, MvCalibration};
use crate::policy_sim::SimulationResult;
use crate::riccati::{FixedPoint, RiccatiSolution};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn schema<T>(msg: impl Into<String>) -> Result<T, IoError> {
    Err(IoError::Schema(msg.into()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioJson {
    #[serde(default)]
    pub a: f64,
    pub b: Vec<f64>,
    pub p: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StateJson {
    #[serde(default)]
    pub a: f64,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
pub enum ModelJson {
    Iid {
        scenarios: Vec<ScenarioJson>,
    },
    Markov {
        states: Vec<StateJson>,
        transition: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StageCostJson {
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "S", default)]
    pub s: Option<Vec<f64>>,
    #[serde(default)]
    pub q: f64,
    #[serde(rename = "qT", default)]
    pub q_t: Option<f64>,
}

/// One shared stage cost, or one per stage (only the last entry carries `qT`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum CostsJson {
    Shared(StageCostJson),
    PerStage(Vec<StageCostJson>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BoxJson {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ConstraintJson {
    Explicit {
        #[serde(rename = "H")]
        h: Vec<Vec<f64>>,
        d: Vec<f64>,
    },
    Box {
        #[serde(rename = "box")]
        bounds: BoxJson,
    },
    Nonneg {
        nonneg: bool,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ConstraintsJson {
    Shared(ConstraintJson),
    PerStage(Vec<ConstraintJson>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum HorizonJson {
    Finite(usize),
    Named(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum RatesJson {
    Shared(f64),
    PerStage(Vec<f64>),
}

/// Problem file; market files add `riskfree` and `xd`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub model: ModelJson,
    #[serde(default)]
    pub costs: Option<CostsJson>,
    #[serde(default)]
    pub constraint: Option<ConstraintsJson>,
    pub horizon: HorizonJson,
    #[serde(default = "one")]
    pub x0: f64,
    /// 1-based.
    #[serde(default)]
    pub initial_state: Option<usize>,
    #[serde(default)]
    pub riskfree: Option<RatesJson>,
    #[serde(default)]
    pub xd: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, IoError> {
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return schema(format!("{what}: ragged rows"));
    }
    Ok(DMatrix::from_row_iterator(
        m,
        n,
        rows.iter().flatten().copied(),
    ))
}

impl ModelJson {
    pub fn to_model(&self) -> Result<StochasticModel, IoError> {
        Ok(match self {
            ModelJson::Iid { scenarios } => StochasticModel::Iid(ScenarioSet::new(
                scenarios
                    .iter()
                    .map(|s| Scenario::new(s.a, &s.b, s.p))
                    .collect(),
            )?),
            ModelJson::Markov { states, transition } => StochasticModel::Markov(MarkovModel::new(
                states
                    .iter()
                    .map(|s| Realization {
                        a: s.a,
                        b: DVector::from_row_slice(&s.b),
                    })
                    .collect(),
                matrix(transition, "transition")?,
            )?),
        })
    }
}

impl StageCostJson {
    fn to_stage(&self) -> Result<StageCost, IoError> {
        let r = matrix(&self.r, "R")?;
        let s = match &self.s {
            Some(s) => DVector::from_row_slice(s),
            None => DVector::zeros(r.nrows()),
        };
        Ok(StageCost::new(r, s, self.q)?)
    }
}

impl CostsJson {
    pub fn to_costs(&self) -> Result<CostSpec, IoError> {
        match self {
            CostsJson::Shared(c) => Ok(CostSpec::stationary(c.to_stage()?, c.q_t.unwrap_or(0.0))),
            CostsJson::PerStage(list) => {
                let Some((last, init)) = list.split_last() else {
                    return schema("costs: empty stage list");
                };
                if init.iter().any(|c| c.q_t.is_some()) {
                    return schema("costs: only the last stage entry may carry qT");
                }
                Ok(CostSpec {
                    stages: list
                        .iter()
                        .map(StageCostJson::to_stage)
                        .collect::<Result<_, _>>()?,
                    terminal_q: last.q_t.unwrap_or(0.0),
                })
            }
        }
    }
}

impl ConstraintJson {
    pub fn to_constraint(&self, n: usize) -> Result<ConstraintSpec, IoError> {
        Ok(match self {
            ConstraintJson::Explicit { h, d } => {
                ConstraintSpec::new(matrix(h, "H")?, DVector::from_row_slice(d))?
            }
            ConstraintJson::Box { bounds } => {
                ConstraintSpec::box_bounds(&bounds.lower, &bounds.upper)?
            }
            ConstraintJson::Nonneg { nonneg: true } => ConstraintSpec::nonneg(n),
            ConstraintJson::Nonneg { nonneg: false } => ConstraintSpec::unconstrained(n),
        })
    }
}

impl ProblemFile {
    pub fn read(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|source| IoError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        Ok(serde_json::from_str(text)?)
    }

    fn horizon(&self) -> Result<Horizon, IoError> {
        match &self.horizon {
            HorizonJson::Finite(t) => Ok(Horizon::Finite(*t)),
            HorizonJson::Named(s) if s == "infinite" => Ok(Horizon::Infinite),
            HorizonJson::Named(s) => schema(format!(
                "horizon: expected an integer or \"infinite\", got {s:?}"
            )),
        }
    }

    fn initial_state(&self) -> Result<usize, IoError> {
        match self.initial_state {
            None => Ok(0),
            Some(0) => schema("initial_state is 1-based"),
            Some(s) => Ok(s - 1),
        }
    }

    pub fn to_spec(&self) -> Result<ProblemSpec, IoError> {
        let model = self.model.to_model()?;
        let n = model.dim();
        let Some(costs) = &self.costs else {
            return schema("costs: missing");
        };
        let constraints = match &self.constraint {
            None => vec![ConstraintSpec::unconstrained(n)],
            Some(ConstraintsJson::Shared(c)) => vec![c.to_constraint(n)?],
            Some(ConstraintsJson::PerStage(list)) => list
                .iter()
                .map(|c| c.to_constraint(n))
                .collect::<Result<_, _>>()?,
        };
        Ok(ProblemSpec {
            model,
            costs: costs.to_costs()?,
            constraints,
            horizon: self.horizon()?,
            x0: self.x0,
            initial_state: self.initial_state()?,
        })
    }

    /// Market view: `B` values are excess returns, `R` from `costs` is the
    /// control penalty (zero if absent); `S`, `q`, drifts and any constraint
    /// are ignored because the embedding fixes them.
    pub fn to_market(&self) -> Result<MarketSpec, IoError> {
        let excess = self.model.to_model()?;
        let n = excess.dim();
        let horizon = match self.horizon()? {
            Horizon::Finite(t) => t,
            Horizon::Infinite => return schema("market horizon must be finite"),
        };
        let riskfree = match &self.riskfree {
            Some(RatesJson::Shared(r)) => vec![*r],
            Some(RatesJson::PerStage(r)) => r.clone(),
            None => return schema("riskfree: missing"),
        };
        let Some(xd) = self.xd else {
            return schema("xd: missing");
        };
        let penalty = match &self.costs {
            None => vec![DMatrix::zeros(n, n)],
            Some(c) => c.to_costs()?.stages.into_iter().map(|s| s.r).collect(),
        };
        Ok(MarketSpec {
            riskfree,
            excess,
            horizon,
            x0: self.x0,
            xd,
            penalty,
            initial_state: self.initial_state()?,
        })
    }
}

/// Serialized [`RiccatiSolution`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RiccatiDoc {
    pub horizon: usize,
    pub n_states: usize,
    pub ghat: Vec<Vec<f64>>,
    pub gbar: Vec<Vec<f64>>,
    pub khat: Vec<Vec<Vec<f64>>>,
    pub kbar: Vec<Vec<Vec<f64>>>,
}

fn gains_doc(k: &[Vec<DVector<f64>>]) -> Vec<Vec<Vec<f64>>> {
    k.iter()
        .map(|row| row.iter().map(|v| v.iter().copied().collect()).collect())
        .collect()
}

fn gains_from_doc(k: &[Vec<Vec<f64>>]) -> Vec<Vec<DVector<f64>>> {
    k.iter()
        .map(|row| row.iter().map(|v| DVector::from_row_slice(v)).collect())
        .collect()
}

impl From<&RiccatiSolution> for RiccatiDoc {
    fn from(s: &RiccatiSolution) -> Self {
        RiccatiDoc {
            horizon: s.horizon,
            n_states: s.n_states,
            ghat: s.ghat.clone(),
            gbar: s.gbar.clone(),
            khat: gains_doc(&s.khat),
            kbar: gains_doc(&s.kbar),
        }
    }
}

impl From<&RiccatiDoc> for RiccatiSolution {
    fn from(d: &RiccatiDoc) -> Self {
        RiccatiSolution {
            horizon: d.horizon,
            n_states: d.n_states,
            ghat: d.ghat.clone(),
            gbar: d.gbar.clone(),
            khat: gains_from_doc(&d.khat),
            kbar: gains_from_doc(&d.kbar),
        }
    }
}

/// Serialized [`FixedPoint`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FixedPointDoc {
    pub ghat_star: f64,
    pub gbar_star: f64,
    pub khat_star: Vec<f64>,
    pub kbar_star: Vec<f64>,
    pub converged: bool,
    pub diverged: bool,
    pub iterations: usize,
}

impl From<&FixedPoint> for FixedPointDoc {
    fn from(f: &FixedPoint) -> Self {
        FixedPointDoc {
            ghat_star: f.ghat_star,
            gbar_star: f.gbar_star,
            khat_star: f.khat_star.iter().copied().collect(),
            kbar_star: f.kbar_star.iter().copied().collect(),
            converged: f.converged,
            diverged: f.diverged,
            iterations: f.iterates.len() - 1,
        }
    }
}

/// Serialized [`MvCalibration`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MvDoc {
    pub lambda_star: f64,
    pub x0: f64,
    pub xd: f64,
    /// 1-based.
    pub initial_state: usize,
    pub gamma: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub solution: RiccatiDoc,
}

impl From<&MvCalibration> for MvDoc {
    fn from(c: &MvCalibration) -> Self {
        MvDoc {
            lambda_star: c.lambda_star,
            x0: c.x0,
            xd: c.xd,
            initial_state: c.initial_state + 1,
            gamma: c.gamma.clone(),
            thresholds: c.thresholds.clone(),
            solution: RiccatiDoc::from(&c.solution),
        }
    }
}

/// Contents of `solution.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolutionDoc {
    Finite(RiccatiDoc),
    Infinite(FixedPointDoc),
    Mv(MvDoc),
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| IoError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl SolutionDoc {
    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n").map_err(io_err(path))?;
        w.flush().map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, IoError> {
    csv::Writer::from_path(path).map_err(IoError::from)
}

/// `iteration,ghat,gbar`.
pub fn write_iterates(path: &Path, iterates: &[(f64, f64)]) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(["iteration", "ghat", "gbar"])?;
    for (i, (h, b)) in iterates.iter().enumerate() {
        w.write_record([i.to_string(), h.to_string(), b.to_string()])?;
    }
    w.flush().map_err(io_err(path))
}

/// `path,t,x,u_1..u_n,scenario`; the terminal row has empty control and
/// scenario fields. Scenarios are 1-based.
pub fn write_trajectories(path: &Path, sim: &SimulationResult, n: usize) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["path".to_string(), "t".to_string(), "x".to_string()];
    header.extend((1..=n).map(|i| format!("u_{i}")));
    header.push("scenario".to_string());
    w.write_record(&header)?;
    for (p, path_data) in sim.paths.iter().enumerate() {
        for (t, x) in path_data.x.iter().enumerate() {
            let mut rec = vec![p.to_string(), t.to_string(), x.to_string()];
            match path_data.u.get(t) {
                Some(u) => {
                    rec.extend(u.iter().map(f64::to_string));
                    rec.push((path_data.scenario[t] + 1).to_string());
                }
                None => rec.extend(std::iter::repeat_n(String::new(), n + 1)),
            }
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// `t,mean_x2,stderr`.
pub fn write_stats(path: &Path, sim: &SimulationResult) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(["t", "mean_x2", "stderr"])?;
    for s in &sim.stats {
        w.write_record([s.t.to_string(), s.mean_x2.to_string(), s.stderr.to_string()])?;
    }
    w.flush().map_err(io_err(path))
}

/// `x_d,lambda_star,mean_xT,var_xT,penalty,stderr`; `stderr` is the standard
/// error of the penalty estimate, and hence of `var_xT`.
pub fn write_frontier(path: &Path, points: &[FrontierPoint]) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "x_d",
        "lambda_star",
        "mean_xT",
        "var_xT",
        "penalty",
        "stderr",
    ])?;
    for p in points {
        w.write_record([
            p.xd.to_string(),
            p.lambda_star.to_string(),
            p.mean_xt.to_string(),
            p.var_xt.to_string(),
            p.penalty.to_string(),
            p.penalty_stderr.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}
