//! `clq`: command-line front end for the constrained stochastic LQ solver.
//!
//! Exit codes: 0 success, 1 validation failure, 2 non-convergence or
//! divergence (output files are still written), 3 I/O or parse error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clq::io::{self, FixedPointDoc, MvDoc, ProblemFile, RiccatiDoc, SolutionDoc};
use clq::model::{self, Horizon, ProblemSpec};
use clq::mv::{self, MarketSpec};
use clq::policy_sim::{self, Policy, SimConfig};
use clq::riccati::{self, InfiniteConfig, KMax, RiccatiError, ThresholdVerdict};
use clq::solver::{SolverConfig, SolverError};

#[derive(Parser, Debug)]
#[command(
    name = "clq",
    version,
    about = "Constrained stochastic LQ control with multiplicative noise"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Problem or market file (JSON).
    input: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Projected-gradient tolerance of the gain solver.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Iteration cap: fixed-point iterations for infinite horizons, solver
    /// iterations otherwise.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Markov state at stage 0 (1-based); overrides the file.
    #[arg(long)]
    initial_state: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct SimArgs {
    #[arg(long, default_value_t = 100)]
    paths: usize,
    /// Steps to simulate; defaults to the horizon (30 for infinite horizons).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check every modelling assumption.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Backward recursion over a finite horizon.
    SolveFinite {
        #[command(flatten)]
        common: Common,
    },
    /// Fixed-point iteration for the stationary problem.
    SolveInfinite {
        #[command(flatten)]
        common: Common,
        /// Convergence tolerance on successive iterates.
        #[arg(long, default_value_t = 1e-8)]
        eps: f64,
    },
    /// Classical and sufficient existence tests.
    CheckThreshold {
        #[command(flatten)]
        common: Common,
        /// Bound on |K| over the gain set when it is too large to enumerate.
        #[arg(long)]
        k_bound: Option<f64>,
    },
    /// Closed-loop Monte Carlo of the optimal policy.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, default_value_t = 1e-8)]
        eps: f64,
    },
    /// Mean-variance calibration: multiplier, thresholds and gains.
    MvCalibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Mean-variance efficient frontier.
    MvFrontier {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
        /// Comma-separated target wealth levels.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<f64>>,
    },
}

enum Failure {
    Invalid(String),
    NoConvergence(String),
    Io(String),
}

impl From<io::IoError> for Failure {
    fn from(e: io::IoError) -> Self {
        Failure::Io(e.to_string())
    }
}

fn solver_failure(e: impl std::fmt::Display, nonconvergence: bool) -> Failure {
    if nonconvergence {
        Failure::NoConvergence(e.to_string())
    } else {
        Failure::Invalid(e.to_string())
    }
}

fn riccati_failure(e: RiccatiError) -> Failure {
    let nc = matches!(
        e,
        RiccatiError::Solver {
            source: SolverError::MaxIterations(_) | SolverError::UnboundedBelow { .. },
            ..
        }
    );
    solver_failure(e, nc)
}

fn mv_failure(e: mv::MvError) -> Failure {
    match e {
        mv::MvError::Riccati(r) => riccati_failure(r),
        other => Failure::Invalid(other.to_string()),
    }
}

impl Common {
    fn load(&self) -> Result<ProblemFile, Failure> {
        Ok(ProblemFile::read(&self.input)?)
    }

    fn spec(&self) -> Result<ProblemSpec, Failure> {
        let mut spec = self.load()?.to_spec()?;
        if let Some(s) = self.initial_state {
            spec.initial_state = one_based(s)?;
        }
        Ok(spec)
    }

    fn market(&self) -> Result<MarketSpec, Failure> {
        let mut market = self.load()?.to_market()?;
        if let Some(s) = self.initial_state {
            market.initial_state = one_based(s)?;
        }
        Ok(market)
    }

    fn solver(&self, use_max_iter: bool) -> SolverConfig {
        let mut cfg = SolverConfig {
            tol: self.tol,
            ..SolverConfig::default()
        };
        if let (true, Some(m)) = (use_max_iter, self.max_iter) {
            cfg.max_iter = m;
        }
        cfg
    }

    fn out_dir(&self) -> Result<&Path, Failure> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| Failure::Io(format!("{}: {e}", self.out.display())))?;
        Ok(&self.out)
    }
}

fn one_based(s: usize) -> Result<usize, Failure> {
    s.checked_sub(1)
        .ok_or_else(|| Failure::Invalid("--initial-state is 1-based".to_string()))
}

fn require_valid(spec: &ProblemSpec) -> Result<(), Failure> {
    let report = model::validate(spec);
    if report.is_valid() {
        Ok(())
    } else {
        let lines: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        Err(Failure::Invalid(lines.join("\n")))
    }
}

fn fmt_vec(v: impl IntoIterator<Item = f64>) -> String {
    let parts: Vec<String> = v.into_iter().map(|x| format!("{x:.4}")).collect();
    format!("({})", parts.join(", "))
}

fn validate(common: &Common) -> Result<(), Failure> {
    let file = common.load()?;
    if file.riskfree.is_some() || file.xd.is_some() {
        let mut market = file.to_market()?;
        if let Some(s) = common.initial_state {
            market.initial_state = one_based(s)?;
        }
        let problems = market.validate();
        if !problems.is_empty() {
            return Err(Failure::Invalid(problems.join("\n")));
        }
        println!("market valid");
        return Ok(());
    }
    let mut spec = file.to_spec()?;
    if let Some(s) = common.initial_state {
        spec.initial_state = one_based(s)?;
    }
    let report = model::validate(&spec);
    for note in &report.notes {
        println!("note: {note}");
    }
    if !report.is_valid() {
        let lines: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        return Err(Failure::Invalid(lines.join("\n")));
    }
    println!("valid");
    Ok(())
}

fn solve_finite(common: &Common) -> Result<(), Failure> {
    let spec = common.spec()?;
    require_valid(&spec)?;
    let sol = riccati::solve_finite(&spec, &common.solver(true)).map_err(riccati_failure)?;
    SolutionDoc::Finite(RiccatiDoc::from(&sol)).write(&common.out_dir()?.join("solution.json"))?;
    for t in 0..=sol.horizon {
        println!(
            "t={t}  Ghat={}  Gbar={}",
            fmt_vec(sol.ghat[t].clone()),
            fmt_vec(sol.gbar[t].clone())
        );
    }
    Ok(())
}

fn infinite_config(common: &Common, eps: f64) -> InfiniteConfig {
    let mut cfg = InfiniteConfig {
        solver: common.solver(false),
        eps,
        ..InfiniteConfig::default()
    };
    if let Some(m) = common.max_iter {
        cfg.i_max = m;
    }
    cfg
}

fn solve_infinite(common: &Common, eps: f64) -> Result<(), Failure> {
    let spec = common.spec()?;
    require_valid(&spec)?;
    let fp =
        riccati::solve_infinite(&spec, &infinite_config(common, eps)).map_err(riccati_failure)?;
    let out = common.out_dir()?;
    io::write_iterates(&out.join("iterates.csv"), &fp.iterates)?;
    SolutionDoc::Infinite(FixedPointDoc::from(&fp)).write(&out.join("solution.json"))?;
    let iterations = fp.iterates.len() - 1;
    if fp.converged {
        println!(
            "converged after {iterations} iterations: Ghat*={:.6} Gbar*={:.6} Khat*={} Kbar*={}",
            fp.ghat_star,
            fp.gbar_star,
            fmt_vec(fp.khat_star.iter().copied()),
            fmt_vec(fp.kbar_star.iter().copied())
        );
        Ok(())
    } else if fp.diverged {
        Err(Failure::NoConvergence(format!(
            "diverged after {iterations} iterations (Ghat={:e}, Gbar={:e})",
            fp.ghat_star, fp.gbar_star
        )))
    } else {
        Err(Failure::NoConvergence(format!(
            "no convergence within {iterations} iterations"
        )))
    }
}

fn check_threshold(common: &Common, k_bound: Option<f64>) -> Result<(), Failure> {
    let spec = common.spec()?;
    require_valid(&spec)?;
    let rep =
        riccati::check_threshold(&spec, k_bound).map_err(|e| Failure::Invalid(e.to_string()))?;
    if let Some(c) = rep.classical_threshold {
        println!("classical threshold: {c:.6}");
    }
    println!("E[A^2]: {:.6}", rep.e_a2);
    println!("eta: {:.6}", rep.eta);
    match rep.k_max {
        KMax::Enumerated(k) => println!("K_max: {k:.6} (vertex enumeration)"),
        KMax::UserSupplied(k) => println!("K_max: {k:.6} (user bound)"),
        KMax::Unbounded => println!("K_max: unbounded"),
    }
    if let Some(l) = rep.sufficient_lhs {
        println!("E[A^2] + eta*K_max: {l:.6}");
    }
    match rep.verdict {
        ThresholdVerdict::SufficientHolds => {
            println!("sufficient condition holds: a stationary solution exists")
        }
        ThresholdVerdict::Inconclusive => println!("sufficient condition inconclusive"),
    }
    Ok(())
}

fn simulate(common: &Common, sim: &SimArgs, eps: f64) -> Result<(), Failure> {
    let spec = common.spec()?;
    require_valid(&spec)?;
    let out = common.out_dir()?;
    let (policy, steps) = match spec.horizon {
        Horizon::Finite(t) => {
            let sol =
                riccati::solve_finite(&spec, &common.solver(true)).map_err(riccati_failure)?;
            SolutionDoc::Finite(RiccatiDoc::from(&sol)).write(&out.join("solution.json"))?;
            (Policy::from_solution(&sol), sim.steps.unwrap_or(t))
        }
        Horizon::Infinite => {
            let fp = riccati::solve_infinite(&spec, &infinite_config(common, eps))
                .map_err(riccati_failure)?;
            io::write_iterates(&out.join("iterates.csv"), &fp.iterates)?;
            SolutionDoc::Infinite(FixedPointDoc::from(&fp)).write(&out.join("solution.json"))?;
            let policy =
                Policy::stationary(&fp).map_err(|e| Failure::NoConvergence(e.to_string()))?;
            (policy, sim.steps.unwrap_or(30))
        }
    };
    let cfg = SimConfig {
        n_paths: sim.paths,
        steps: Some(steps),
        seed: sim.seed,
        initial_state: spec.initial_state,
        ..SimConfig::default()
    };
    let res =
        policy_sim::simulate(&spec, &policy, &cfg).map_err(|e| Failure::Invalid(e.to_string()))?;
    io::write_trajectories(&out.join("trajectories.csv"), &res, spec.dim())?;
    io::write_stats(&out.join("stats.csv"), &res)?;
    let last = res.stats.last().expect("at least one stage");
    println!(
        "{} paths, {} steps: E[x_T^2] = {:.6e} +/- {:.2e}, mean cost {:.6} +/- {:.2e}",
        res.n_paths, res.steps, last.mean_x2, last.stderr, res.mean_cost, res.cost_stderr
    );
    Ok(())
}

fn mv_calibrate(common: &Common) -> Result<(), Failure> {
    let market = common.market()?;
    let cal = mv::calibrate(&market, &common.solver(true)).map_err(mv_failure)?;
    SolutionDoc::Mv(MvDoc::from(&cal)).write(&common.out_dir()?.join("solution.json"))?;
    println!("lambda* = {:.4}", cal.lambda_star);
    println!("threshold wealth at t=0: {:.2}", cal.thresholds[0]);
    println!("Ghat_0 = {:.6}, Gbar_0 = {:.6}", cal.ghat0(), cal.gbar0());
    for j in 0..cal.solution.n_states {
        println!(
            "state {}: Khat_0 = {}  Kbar_0 = {}",
            j + 1,
            fmt_vec(cal.solution.khat[0][j].iter().copied()),
            fmt_vec(cal.solution.kbar[0][j].iter().copied())
        );
    }
    Ok(())
}

fn mv_frontier(common: &Common, sim: &SimArgs, targets: Option<&[f64]>) -> Result<(), Failure> {
    let market = common.market()?;
    let cal = mv::calibrate(&market, &common.solver(true)).map_err(mv_failure)?;
    let floor = cal.gamma[0] * market.x0;
    let targets: Vec<f64> = match targets {
        Some(t) => t.to_vec(),
        None => (1..=10)
            .map(|i| floor + (market.xd - floor) * 0.2 * i as f64)
            .collect(),
    };
    let points = mv::frontier(
        &market,
        &cal,
        &targets,
        sim.paths,
        sim.seed,
        clq::Execution::Parallel,
    )
    .map_err(mv_failure)?;
    io::write_frontier(&common.out_dir()?.join("frontier.csv"), &points)?;
    for p in &points {
        println!(
            "x_d={:.4} lambda*={:.4} E[x_T]={:.4} Var[x_T]={:.6}",
            p.xd, p.lambda_star, p.mean_xt, p.var_xt
        );
    }
    Ok(())
}

fn configure_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("CLQ_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if n > 0 {
            // The global pool can only be configured once; a second attempt is harmless.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match &cli.command {
        Command::Validate { common } => validate(common),
        Command::SolveFinite { common } => solve_finite(common),
        Command::SolveInfinite { common, eps } => solve_infinite(common, *eps),
        Command::CheckThreshold { common, k_bound } => check_threshold(common, *k_bound),
        Command::Simulate { common, sim, eps } => simulate(common, sim, *eps),
        Command::MvCalibrate { common } => mv_calibrate(common),
        Command::MvFrontier {
            common,
            sim,
            targets,
        } => mv_frontier(common, sim, targets.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("invalid: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::NoConvergence(msg)) => {
            eprintln!("not converged: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
