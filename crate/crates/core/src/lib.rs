//! Minimal-dispersion approximately balancing weights.
//!
//! Weights are obtained by solving the L1-penalized dual of a
//! dispersion-minimization program subject to box constraints on covariate
//! imbalance. The crate covers the dispersion transforms, the accelerated
//! proximal-gradient dual solver, basis construction, weighted estimation with
//! a plug-in variance estimator, bootstrap selection of the balance tolerance,
//! simulation generators and a replication harness.

pub mod balance;
pub mod bench;
pub mod dispersion;
pub mod dual_solver;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod rng;
pub mod simgen;
pub mod tuning;

pub use balance::{expand_basis, imbalance, target_profile, BalanceTarget, BasisConfig, BasisMatrix, TargetKind};
pub use dispersion::{check_conjugacy, ConjugacyReport, DispersionKind, DispersionSpec};
pub use dual_solver::{kkt_residual, solve_dual, DualProblem, KktEntry, SolveResult, SolveStatus, SolverOptions};
pub use error::{DataError, Error, Result};
pub use estimator::{estimate_effect, estimate_mean, variance_estimate, weighted_mean, EstimateReport, EstimatorForm, Estimand};
pub use simgen::{gen_kang_schafer, gen_wong_chan, load_csv, CsvSchema, Dataset, OutcomeModel, Overlap};
pub use tuning::{bootstrap_balance, tune_delta, Sampling, TuneConfig, TuneResult};
