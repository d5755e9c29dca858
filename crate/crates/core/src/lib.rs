//! Constrained linear-quadratic control of scalar-state systems with
//! multiplicative noise.
//!
//! The system is `x_{t+1} = A_t x_t + B_t u_t` with `(A_t, B_t)` drawn from a
//! finite scenario set (i.i.d. or Markov), subject to `H u_t <= d |x_t|`.
//! The optimal policy is piecewise linear in the state,
//! `u = K̂_t x` for `x >= 0` and `u = -K̄_t x` for `x < 0`, with gains from a
//! pair of coupled Riccati-type recursions.
//!
//! Module map:
//!
//! - [`model`]: problem data and assumption checks
//! - [`objective`]: the per-stage piecewise-quadratic objectives
//! - [`solver`]: minimization over the gain polyhedron, plus a grid oracle
//! - [`riccati`]: finite/infinite-horizon recursions and existence checks
//! - [`policy_sim`]: policies, Monte Carlo, exact scenario trees, stability
//! - [`mv`]: mean-variance portfolio layer
//! - [`io`]: file formats
//!
//! ```
//! use clq::model::{ConstraintSpec, CostSpec, Horizon, ProblemSpec, ScenarioSet, StageCost, StochasticModel};
//! use clq::riccati::solve_finite;
//! use clq::solver::SolverConfig;
//! use nalgebra::{DMatrix, DVector};
//!
//! let spec = ProblemSpec {
//!     model: StochasticModel::Iid(ScenarioSet::uniform(&[(0.9, vec![1.0]), (1.1, vec![0.5])]).unwrap()),
//!     costs: CostSpec::stationary(
//!         StageCost::new(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1), 1.0).unwrap(),
//!         1.0,
//!     ),
//!     constraints: vec![ConstraintSpec::box_bounds(&[-0.5], &[0.0]).unwrap()],
//!     horizon: Horizon::Finite(3),
//!     x0: 1.0,
//!     initial_state: 0,
//! };
//! let sol = solve_finite(&spec, &SolverConfig::default()).unwrap();
//! assert!(sol.ghat[0][0] >= 1.0);
//! ```

// `!(x > y)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod io;
pub mod linalg;
pub mod model;
pub mod mv;
pub mod objective;
pub mod par;
pub mod policy_sim;
pub mod riccati;
pub mod solver;

pub use par::Execution;

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Objective(#[from] objective::ObjectiveError),
    #[error(transparent)]
    Solver(#[from] solver::SolverError),
    #[error(transparent)]
    Riccati(#[from] riccati::RiccatiError),
    #[error(transparent)]
    Policy(#[from] policy_sim::PolicyError),
    #[error(transparent)]
    Mv(#[from] mv::MvError),
    #[error(transparent)]
    Io(#[from] io::IoError),
}
