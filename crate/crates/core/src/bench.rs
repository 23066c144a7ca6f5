//! Replication harness: generate, weight, estimate, aggregate.
//!
//! Replication `r` generates its dataset from
//! `derive_seed(seed, tags::DATASET, r)` and tunes with
//! `derive_seed(seed, tags::TUNING, r)` (`tags::TUNING_CONTROL` for the
//! control arm of an average effect). Replications run in parallel and are
//! assembled by index, so reports do not depend on scheduling.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{expand_basis, target_profile, BalanceTarget, BasisConfig, BasisMatrix, TargetKind};
use crate::dispersion::{DispersionKind, DispersionSpec, DEFAULT_EPSILON};
use crate::dual_solver::{solve_dual, DualProblem, SolveResult, SolveStatus, SolverOptions};
use crate::error::{Error, Result};
use crate::estimator::{estimate_effect, estimate_mean, uniform_weights, EstimateReport, Estimand, EstimatorForm};
use crate::rng::{derive_seed, tags};
use crate::simgen::{gen_kang_schafer, gen_wong_chan, Dataset, OutcomeModel, Overlap};
use crate::tuning::{bootstrap_balance, grid_ceiling, tune_delta_with_solution, TuneConfig, DEFAULT_FRACTION, DEFAULT_GRID_POINTS, DEFAULT_REPLICATES};

/// Largest standardized KKT residual tolerated from a solve that hit the
/// iteration limit.
pub const INFEASIBLE_KKT: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DgpSpec {
    KangSchafer { n: usize, overlap: Overlap },
    WongChan { n: usize, outcome_model: OutcomeModel },
}

impl DgpSpec {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match *self {
            DgpSpec::KangSchafer { n, overlap } => gen_kang_schafer(n, overlap, seed),
            DgpSpec::WongChan { n, outcome_model } => gen_wong_chan(n, outcome_model, seed),
        }
    }

    pub fn n(&self) -> usize {
        match *self {
            DgpSpec::KangSchafer { n, .. } | DgpSpec::WongChan { n, .. } => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BalanceMode {
    Exact,
    Tuned,
    Fixed { delta: f64 },
    /// Fixed-delta runs over a grid, aggregated into curves.
    Sweep { grid: Vec<f64> },
}

impl fmt::Display for BalanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BalanceMode::Exact => f.write_str("exact"),
            BalanceMode::Tuned => f.write_str("tuned"),
            BalanceMode::Fixed { delta } => write!(f, "fixed:{delta}"),
            BalanceMode::Sweep { .. } => f.write_str("sweep"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningSpec {
    pub grid_points: usize,
    /// Defaults to `K^{-1/2}`.
    pub grid_max: Option<f64>,
    pub replicates: usize,
    pub fraction: f64,
    pub allow_large_delta: bool,
}

impl Default for TuningSpec {
    fn default() -> Self {
        TuningSpec {
            grid_points: DEFAULT_GRID_POINTS,
            grid_max: None,
            replicates: DEFAULT_REPLICATES,
            fraction: DEFAULT_FRACTION,
            allow_large_delta: false,
        }
    }
}

impl TuningSpec {
    pub fn config(&self, balanced_columns: usize, grid: Option<&[f64]>, seed: u64) -> TuneConfig {
        let grid = match grid {
            Some(g) => g.to_vec(),
            None => {
                let max = self.grid_max.unwrap_or_else(|| grid_ceiling(balanced_columns));
                crate::dispersion::linspace(0.0, max, self.grid_points)
            }
        };
        let mut c = TuneConfig::new(grid, seed);
        c.replicates = self.replicates;
        c.replicate_fraction = self.fraction;
        c.allow_large_delta = self.allow_large_delta;
        c
    }
}

fn default_moments() -> u8 {
    1
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub dgp: DgpSpec,
    pub replications: usize,
    pub estimands: Vec<Estimand>,
    pub dispersions: Vec<DispersionKind>,
    pub modes: Vec<BalanceMode>,
    #[serde(default = "default_moments")]
    pub moments: u8,
    #[serde(default)]
    pub tuning: TuningSpec,
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverOptions,
    /// Smoothing width for the absolute-deviation dispersion.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl BenchSpec {
    pub fn preset(name: &str) -> Result<BenchSpec> {
        let all = DispersionKind::ALL.to_vec();
        let (dgp, estimands, moments) = match name {
            "ks-good" => (DgpSpec::KangSchafer { n: 1000, overlap: Overlap::Good }, vec![Estimand::Mean], 1),
            "ks-bad" => (DgpSpec::KangSchafer { n: 1000, overlap: Overlap::Bad }, vec![Estimand::Mean], 1),
            "wc-a" => (
                DgpSpec::WongChan { n: 5000, outcome_model: OutcomeModel::A },
                vec![Estimand::Att, Estimand::Ate],
                2,
            ),
            "wc-b" => (
                DgpSpec::WongChan { n: 5000, outcome_model: OutcomeModel::B },
                vec![Estimand::Att, Estimand::Ate],
                2,
            ),
            other => return Err(Error::Usage(format!("unknown preset '{other}' (expected ks-good, ks-bad, wc-a or wc-b)"))),
        };
        Ok(BenchSpec {
            dgp,
            replications: 1000,
            estimands,
            dispersions: all,
            modes: vec![BalanceMode::Exact, BalanceMode::Tuned],
            moments,
            tuning: TuningSpec::default(),
            seed: 20190101,
            solver: SolverOptions::default(),
            epsilon: default_epsilon(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidInput("replications must be at least 1".into()));
        }
        if self.dgp.n() < 2 {
            return Err(Error::InvalidInput("dataset size must be at least 2".into()));
        }
        if self.estimands.is_empty() || self.dispersions.is_empty() || self.modes.is_empty() {
            return Err(Error::InvalidInput("estimands, dispersions and modes must be non-empty".into()));
        }
        for e in &self.estimands {
            let ok = matches!(
                (&self.dgp, e),
                (DgpSpec::KangSchafer { .. }, Estimand::Mean) | (DgpSpec::WongChan { .. }, Estimand::Att | Estimand::Ate)
            );
            if !ok {
                return Err(Error::InvalidInput(format!("estimand {e} does not fit this design")));
            }
        }
        if !(1..=2).contains(&self.moments) {
            return Err(Error::InvalidInput(format!("moments must be 1 or 2, got {}", self.moments)));
        }
        for m in &self.modes {
            match m {
                BalanceMode::Fixed { delta } if !(delta.is_finite() && *delta >= 0.0) => {
                    return Err(Error::InvalidInput(format!("fixed delta must be finite and nonnegative, got {delta}")));
                }
                BalanceMode::Sweep { grid } => {
                    let probe = TuneConfig {
                        grid: grid.clone(),
                        allow_large_delta: true,
                        ..self.tuning.config(1, Some(grid), 0)
                    };
                    probe.validate(1)?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn basis_config(&self) -> BasisConfig {
        BasisConfig {
            moments: self.moments,
            ..BasisConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    /// Exact or fixed-delta balance could not be met.
    Infeasible,
    /// Any other error (tuning without a converged grid point, singular
    /// variance system, ...).
    Failed,
}

/// One estimate from one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub replication: usize,
    pub estimand: Estimand,
    pub dispersion: DispersionKind,
    pub mode: String,
    pub delta: Option<f64>,
    pub status: RunStatus,
    pub estimate: Option<f64>,
    pub truth: f64,
    pub ci: Option<[f64; 2]>,
    /// Mean bootstrap balance, recorded for sweeps.
    pub c_s: Option<f64>,
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimand: Estimand,
    pub dispersion: DispersionKind,
    pub mode: String,
    pub replications: usize,
    pub completed: usize,
    pub infeasible: usize,
    pub failed: usize,
    /// `infeasible` when most replications could not meet the constraints.
    pub status: RunStatus,
    pub rmse: Option<f64>,
    pub bias: Option<f64>,
    pub mc_se_rmse: Option<f64>,
    pub coverage: Option<f64>,
    pub mean_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub delta: f64,
    pub mse: Option<f64>,
    pub c_s: Option<f64>,
    pub completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub estimand: Estimand,
    pub dispersion: DispersionKind,
    /// Balanced (non-intercept) basis columns; the marker sits at `K^{-1/2}`.
    pub k: usize,
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub rows: Vec<SummaryRow>,
    pub sweeps: Vec<SweepCurve>,
    pub log: Vec<LogEntry>,
}

/// Estimate plus the tuned delta, if any.
struct Outcome {
    report: EstimateReport,
    delta: f64,
}

enum Attempt {
    Done(Outcome),
    Infeasible(String),
}

fn feasible(res: &SolveResult) -> bool {
    res.converged || (res.status() == SolveStatus::MaxIterations && res.diagnostics.max_kkt_residual <= INFEASIBLE_KKT)
}

struct Arm<'a> {
    z: &'a [bool],
    target: BalanceTarget,
    spec: DispersionSpec,
}

impl<'a> Arm<'a> {
    fn new(z: &'a [bool], target: BalanceTarget, kind: DispersionKind, epsilon: f64) -> Result<Self> {
        Ok(Arm {
            z,
            target,
            spec: DispersionSpec::for_indicator(kind, z, epsilon)?,
        })
    }

    fn solve(&self, basis: &BasisMatrix, delta: f64, solver: &SolverOptions) -> Result<SolveResult> {
        let p = DualProblem::with_target(basis, self.z, self.target.clone(), basis.delta_vector(delta), self.spec)?;
        solve_dual(&p, solver)
    }

    /// Weights at `delta`, or `None` if infeasible.
    fn weights_at(&self, basis: &BasisMatrix, delta: f64, solver: &SolverOptions) -> Result<std::result::Result<Array1<f64>, String>> {
        let res = self.solve(basis, delta, solver)?;
        if feasible(&res) {
            Ok(Ok(res.weights))
        } else {
            Ok(Err(format!(
                "solver {} after {} iterations, max KKT residual {:.3e}",
                res.status(),
                res.iterations,
                res.diagnostics.max_kkt_residual
            )))
        }
    }

    fn tuned(&self, basis: &BasisMatrix, config: &TuneConfig, solver: &SolverOptions) -> Result<(Array1<f64>, f64)> {
        let (t, res) = tune_delta_with_solution(basis, self.z, &self.target, &self.spec, solver, config)?;
        Ok((res.weights, t.selected))
    }
}

/// Per-replication design: the basis and the arms to weight.
struct Design<'a> {
    data: &'a Dataset,
    basis: BasisMatrix,
    control: Vec<bool>,
}

impl<'a> Design<'a> {
    fn arms(&self, estimand: Estimand, kind: DispersionKind, epsilon: f64) -> Result<Vec<Arm<'_>>> {
        let b = &self.basis;
        match estimand {
            Estimand::Mean => Ok(vec![Arm::new(&self.data.z, target_profile(b, &self.data.z, TargetKind::PopulationMean)?, kind, epsilon)?]),
            Estimand::Att => Ok(vec![Arm::new(&self.control, target_profile(b, &self.data.z, TargetKind::TreatedMean)?, kind, epsilon)?]),
            Estimand::Ate => {
                let pop = target_profile(b, &self.data.z, TargetKind::PopulationMean)?;
                Ok(vec![
                    Arm::new(&self.data.z, pop.clone(), kind, epsilon)?,
                    Arm::new(&self.control, pop, kind, epsilon)?,
                ])
            }
        }
    }

    fn truth(&self, estimand: Estimand) -> Result<f64> {
        let t = self
            .data
            .truth
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("dataset carries no truth".into()))?;
        match estimand {
            Estimand::Mean => t.target_mean,
            Estimand::Att => t.att(&self.data.z),
            Estimand::Ate => t.ate(),
        }
        .ok_or_else(|| Error::InvalidInput(format!("dataset has no truth for {estimand}")))
    }

    fn estimate(&self, estimand: Estimand, weights: &[Array1<f64>]) -> Result<EstimateReport> {
        let y = self.data.y.as_ref().ok_or_else(|| Error::InvalidInput("dataset has no outcome".into()))?;
        match estimand {
            Estimand::Mean => estimate_mean(&weights[0], &self.data.z, y, &self.basis, EstimatorForm::HorvitzThompson),
            Estimand::Att => estimate_effect(&self.data.z, y, &self.basis, &uniform_weights(&self.data.z), &weights[0], estimand),
            Estimand::Ate => estimate_effect(&self.data.z, y, &self.basis, &weights[0], &weights[1], estimand),
        }
    }

    fn run_fixed(&self, arms: &[Arm<'_>], estimand: Estimand, delta: f64, solver: &SolverOptions) -> Result<Attempt> {
        let mut ws = Vec::with_capacity(arms.len());
        for arm in arms {
            match arm.weights_at(&self.basis, delta, solver)? {
                Ok(w) => ws.push(w),
                Err(msg) => return Ok(Attempt::Infeasible(msg)),
            }
        }
        Ok(Attempt::Done(Outcome {
            report: self.estimate(estimand, &ws)?,
            delta,
        }))
    }

    fn run_tuned(&self, arms: &[Arm<'_>], estimand: Estimand, spec: &BenchSpec, replication: usize) -> Result<Attempt> {
        let k = self.basis.balanced_count();
        let mut ws = Vec::with_capacity(arms.len());
        let mut deltas = Vec::with_capacity(arms.len());
        for (a, arm) in arms.iter().enumerate() {
            let tag = if a == 0 { tags::TUNING } else { tags::TUNING_CONTROL };
            let cfg = spec.tuning.config(k, None, derive_seed(spec.seed, tag, replication as u64));
            let (w, d) = arm.tuned(&self.basis, &cfg, &spec.solver)?;
            ws.push(w);
            deltas.push(d);
        }
        Ok(Attempt::Done(Outcome {
            report: self.estimate(estimand, &ws)?,
            delta: deltas.iter().sum::<f64>() / deltas.len() as f64,
        }))
    }

    /// Mean bootstrap balance of the arms at `delta`.
    fn sweep_point(&self, arms: &[Arm<'_>], estimand: Estimand, delta: f64, spec: &BenchSpec, replication: usize) -> Result<(Attempt, Option<f64>)> {
        let k = self.basis.balanced_count();
        let mut ws = Vec::with_capacity(arms.len());
        let mut scores = Vec::with_capacity(arms.len());
        for (a, arm) in arms.iter().enumerate() {
            match arm.weights_at(&self.basis, delta, &spec.solver)? {
                Ok(w) => {
                    let tag = if a == 0 { tags::TUNING } else { tags::TUNING_CONTROL };
                    let cfg = spec.tuning.config(k, Some(&[delta]), derive_seed(spec.seed, tag, replication as u64));
                    scores.push(bootstrap_balance(&w, arm.z, &self.basis, &arm.target, &cfg)?);
                    ws.push(w);
                }
                Err(msg) => return Ok((Attempt::Infeasible(msg), None)),
            }
        }
        let c_s = scores.iter().sum::<f64>() / scores.len() as f64;
        Ok((
            Attempt::Done(Outcome {
                report: self.estimate(estimand, &ws)?,
                delta,
            }),
            Some(c_s),
        ))
    }
}

fn entry(
    replication: usize,
    estimand: Estimand,
    dispersion: DispersionKind,
    mode: String,
    truth: f64,
    attempt: Result<Attempt>,
    c_s: Option<f64>,
    fixed_delta: Option<f64>,
) -> LogEntry {
    let base = LogEntry {
        replication,
        estimand,
        dispersion,
        mode,
        delta: fixed_delta,
        status: RunStatus::Ok,
        estimate: None,
        truth,
        ci: None,
        c_s,
        message: None,
    };
    match attempt {
        Ok(Attempt::Done(o)) => LogEntry {
            delta: Some(o.delta),
            estimate: Some(o.report.point),
            ci: Some([o.report.ci.0, o.report.ci.1]),
            ..base
        },
        Ok(Attempt::Infeasible(msg)) => LogEntry {
            status: RunStatus::Infeasible,
            message: Some(msg),
            ..base
        },
        Err(e) => LogEntry {
            status: RunStatus::Failed,
            message: Some(e.to_string()),
            ..base
        },
    }
}

fn run_replication(spec: &BenchSpec, replication: usize) -> Vec<LogEntry> {
    let seed = derive_seed(spec.seed, tags::DATASET, replication as u64);
    let data = match spec.dgp.generate(seed) {
        Ok(d) => d,
        Err(e) => return vec![failure_entry(replication, spec, &e)],
    };
    let basis = match expand_basis(data.x.view(), &data.names, &spec.basis_config()) {
        Ok(b) => b,
        Err(e) => return vec![failure_entry(replication, spec, &e)],
    };
    let control: Vec<bool> = data.z.iter().map(|v| !v).collect();
    let design = Design {
        data: &data,
        basis,
        control,
    };

    let mut log = Vec::new();
    for &estimand in &spec.estimands {
        let truth = design.truth(estimand).unwrap_or(f64::NAN);
        for &kind in &spec.dispersions {
            let arms = match design.arms(estimand, kind, spec.epsilon) {
                Ok(a) => a,
                Err(e) => {
                    for mode in &spec.modes {
                        log.push(entry(replication, estimand, kind, mode.to_string(), truth, Err(Error::InvalidInput(e.to_string())), None, None));
                    }
                    continue;
                }
            };
            for mode in &spec.modes {
                match mode {
                    BalanceMode::Exact => {
                        let a = design.run_fixed(&arms, estimand, 0.0, &spec.solver);
                        log.push(entry(replication, estimand, kind, mode.to_string(), truth, a, None, Some(0.0)));
                    }
                    BalanceMode::Fixed { delta } => {
                        let a = design.run_fixed(&arms, estimand, *delta, &spec.solver);
                        log.push(entry(replication, estimand, kind, mode.to_string(), truth, a, None, Some(*delta)));
                    }
                    BalanceMode::Tuned => {
                        let a = design.run_tuned(&arms, estimand, spec, replication);
                        log.push(entry(replication, estimand, kind, mode.to_string(), truth, a, None, None));
                    }
                    BalanceMode::Sweep { grid } => {
                        for &delta in grid {
                            let (a, c_s) = match design.sweep_point(&arms, estimand, delta, spec, replication) {
                                Ok((a, c)) => (Ok(a), c),
                                Err(e) => (Err(e), None),
                            };
                            log.push(entry(replication, estimand, kind, mode.to_string(), truth, a, c_s, Some(delta)));
                        }
                    }
                }
            }
        }
    }
    log
}

fn failure_entry(replication: usize, spec: &BenchSpec, e: &Error) -> LogEntry {
    LogEntry {
        replication,
        estimand: spec.estimands[0],
        dispersion: spec.dispersions[0],
        mode: "generate".into(),
        delta: None,
        status: RunStatus::Failed,
        estimate: None,
        truth: f64::NAN,
        ci: None,
        c_s: None,
        message: Some(e.to_string()),
    }
}

/// RMSE, bias, Monte Carlo standard error of the RMSE and coverage over the
/// completed entries.
fn aggregate(entries: &[&LogEntry]) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    let done: Vec<&LogEntry> = entries.iter().copied().filter(|e| e.status == RunStatus::Ok).collect();
    if done.is_empty() {
        return (None, None, None, None);
    }
    let m = done.len() as f64;
    let errs: Vec<f64> = done.iter().map(|e| e.estimate.unwrap() - e.truth).collect();
    let mse = errs.iter().map(|e| e * e).sum::<f64>() / m;
    let rmse = mse.sqrt();
    let bias = errs.iter().sum::<f64>() / m;
    let mc_se = if done.len() > 1 && rmse > 0.0 {
        let var_sq = errs.iter().map(|e| (e * e - mse).powi(2)).sum::<f64>() / (m - 1.0);
        Some((var_sq / m).sqrt() / (2.0 * rmse))
    } else {
        None
    };
    let covered = done
        .iter()
        .filter(|e| e.ci.is_some_and(|[lo, hi]| lo <= e.truth && e.truth <= hi))
        .count();
    (Some(rmse), Some(bias), mc_se, Some(covered as f64 / m))
}

pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let per_rep: Vec<Vec<LogEntry>> = (0..spec.replications).into_par_iter().map(|r| run_replication(spec, r)).collect();
    let log: Vec<LogEntry> = per_rep.into_iter().flatten().collect();

    let k = {
        let probe = spec.dgp.generate(derive_seed(spec.seed, tags::DATASET, 0))?;
        expand_basis(probe.x.view(), &probe.names, &spec.basis_config())?.balanced_count()
    };

    let mut rows = Vec::new();
    let mut sweeps = Vec::new();
    for &estimand in &spec.estimands {
        for &dispersion in &spec.dispersions {
            for mode in &spec.modes {
                let label = mode.to_string();
                let group: Vec<&LogEntry> = log
                    .iter()
                    .filter(|e| e.estimand == estimand && e.dispersion == dispersion && e.mode == label)
                    .collect();
                if let BalanceMode::Sweep { grid } = mode {
                    let points = grid
                        .iter()
                        .map(|&d| {
                            let at: Vec<&LogEntry> = group.iter().copied().filter(|e| e.delta == Some(d)).collect();
                            let (rmse, ..) = aggregate(&at);
                            let scores: Vec<f64> = at.iter().filter_map(|e| e.c_s).collect();
                            CurvePoint {
                                delta: d,
                                mse: rmse.map(|r| r * r),
                                c_s: (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
                                completed: at.iter().filter(|e| e.status == RunStatus::Ok).count(),
                            }
                        })
                        .collect();
                    sweeps.push(SweepCurve {
                        estimand,
                        dispersion,
                        k,
                        points,
                    });
                    continue;
                }
                let count = |s: RunStatus| group.iter().filter(|e| e.status == s).count();
                let (completed, infeasible, failed) = (count(RunStatus::Ok), count(RunStatus::Infeasible), count(RunStatus::Failed));
                let (rmse, bias, mc_se_rmse, coverage) = aggregate(&group);
                let deltas: Vec<f64> = group.iter().filter(|e| e.status == RunStatus::Ok).filter_map(|e| e.delta).collect();
                rows.push(SummaryRow {
                    estimand,
                    dispersion,
                    mode: label,
                    replications: spec.replications,
                    completed,
                    infeasible,
                    failed,
                    status: if 2 * infeasible > spec.replications {
                        RunStatus::Infeasible
                    } else if completed == 0 {
                        RunStatus::Failed
                    } else {
                        RunStatus::Ok
                    },
                    rmse,
                    bias,
                    mc_se_rmse,
                    coverage,
                    mean_delta: (!deltas.is_empty()).then(|| deltas.iter().sum::<f64>() / deltas.len() as f64),
                });
            }
        }
    }
    Ok(BenchReport {
        spec: spec.clone(),
        rows,
        sweeps,
        log,
    })
}

impl BenchReport {
    pub fn row(&self, estimand: Estimand, dispersion: DispersionKind, mode: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.estimand == estimand && r.dispersion == dispersion && r.mode == mode)
    }

    /// Summary rows as CSV.
    pub fn rows_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut s = String::from("estimand,dispersion,mode,replications,completed,infeasible,failed,status,rmse,bias,mc_se_rmse,coverage,mean_delta\n");
        for r in &self.rows {
            let status = match r.status {
                RunStatus::Ok => "ok",
                RunStatus::Infeasible => "infeasible",
                RunStatus::Failed => "failed",
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.estimand,
                r.dispersion,
                r.mode,
                r.replications,
                r.completed,
                r.infeasible,
                r.failed,
                status,
                opt(r.rmse),
                opt(r.bias),
                opt(r.mc_se_rmse),
                opt(r.coverage),
                opt(r.mean_delta)
            );
        }
        s
    }
}

/// Tidy sweep table: `estimand,dispersion,delta,mse,c_s`.
pub fn curves_csv(report: &BenchReport) -> Result<String> {
    if report.sweeps.is_empty() {
        return Err(Error::Usage("report has no delta sweep; add a sweep mode to the bench spec".into()));
    }
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let mut s = String::from("estimand,dispersion,delta,mse,c_s\n");
    for c in &report.sweeps {
        for p in &c.points {
            let _ = writeln!(s, "{},{},{:?},{},{}", c.estimand, c.dispersion, p.delta, opt(p.mse), opt(p.c_s));
        }
    }
    Ok(s)
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 360.0;
const PAD: f64 = 48.0;

/// Line plot of MSE and `C_S` against delta, each rescaled to its own range,
/// with a dotted vertical marker at `K^{-1/2}`.
pub fn curve_svg(curve: &SweepCurve) -> String {
    let marker = grid_ceiling(curve.k);
    let x_max = curve
        .points
        .iter()
        .map(|p| p.delta)
        .fold(marker, f64::max)
        .max(f64::MIN_POSITIVE);
    let sx = |d: f64| PAD + d / x_max * (SVG_W - 2.0 * PAD);
    let series = |get: &dyn Fn(&CurvePoint) -> Option<f64>| -> String {
        let vals: Vec<(f64, f64)> = curve.points.iter().filter_map(|p| get(p).map(|v| (p.delta, v))).collect();
        let lo = vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        let hi = vals.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        vals.iter()
            .map(|&(d, v)| format!("{:.2},{:.2}", sx(d), SVG_H - PAD - (v - lo) / span * (SVG_H - 2.0 * PAD)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="24" font-family="sans-serif" font-size="14">{} / {}: MSE (solid) and C_S (dashed), rescaled</text>"#,
        curve.estimand, curve.dispersion
    );
    let base = SVG_H - PAD;
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, SVG_W - PAD);
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{base}" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">delta (max {x_max:.4})</text>"#,
        SVG_W / 2.0,
        SVG_H - 12.0
    );
    let mx = sx(marker);
    let _ = writeln!(
        s,
        r#"<line id="k-marker" x1="{mx:.2}" y1="{PAD}" x2="{mx:.2}" y2="{base}" stroke="gray" stroke-dasharray="2,4" data-delta="{marker:?}"/>"#
    );
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, series(&|p| p.mse));
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="darkorange" stroke-width="2" stroke-dasharray="6,3" points="{}"/>"#,
        series(&|p| p.c_s)
    );
    s.push_str("</svg>\n");
    s
}

/// Writes `curves.csv` and one SVG per sweep into `dir`; returns the paths.
pub fn emit_curves(report: &BenchReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let csv = curves_csv(report)?;
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    let csv_path = dir.join("curves.csv");
    std::fs::write(&csv_path, csv)?;
    paths.push(csv_path);
    for c in &report.sweeps {
        let p = dir.join(format!("curve_{}_{}.svg", c.estimand, c.dispersion.tag()));
        std::fs::write(&p, curve_svg(c))?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(modes: Vec<BalanceMode>) -> BenchSpec {
        BenchSpec {
            dgp: DgpSpec::KangSchafer { n: 200, overlap: Overlap::Good },
            replications: 3,
            estimands: vec![Estimand::Mean],
            dispersions: vec![DispersionKind::NegativeEntropy],
            modes,
            moments: 1,
            tuning: TuningSpec {
                grid_points: 3,
                ..TuningSpec::default()
            },
            seed: 4,
            solver: SolverOptions::default(),
            epsilon: 1e-3,
        }
    }

    #[test]
    fn single_replication_rmse_is_absolute_error() {
        let mut spec = small(vec![BalanceMode::Exact]);
        spec.replications = 1;
        let r = run_bench(&spec).unwrap();
        assert_eq!(r.rows.len(), 1);
        let e = &r.log[0];
        assert_eq!(e.status, RunStatus::Ok);
        let rmse = r.rows[0].rmse.unwrap();
        assert!((rmse - (e.estimate.unwrap() - 210.0).abs()).abs() < 1e-12);
    }

    #[test]
    fn sweep_curves_and_files() {
        let spec = small(vec![BalanceMode::Sweep { grid: vec![0.0, 0.1, 0.2] }]);
        let r = run_bench(&spec).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.sweeps.len(), 1);
        assert_eq!(r.sweeps[0].points.len(), 3);
        let csv = curves_csv(&r).unwrap();
        assert_eq!(csv.lines().count(), 4);
        let svg = curve_svg(&r.sweeps[0]);
        assert!(svg.contains(&format!("data-delta=\"{:?}\"", 0.5)));
        let dir = tempfile::tempdir().unwrap();
        let files = emit_curves(&r, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let again = run_bench(&spec).unwrap();
        assert_eq!(curves_csv(&again).unwrap(), csv);
    }

    #[test]
    fn curves_need_a_sweep() {
        let r = run_bench(&small(vec![BalanceMode::Exact])).unwrap();
        assert!(matches!(curves_csv(&r), Err(Error::Usage(_))));
    }

    #[test]
    fn presets_parse_and_validate() {
        for p in ["ks-good", "ks-bad", "wc-a", "wc-b"] {
            BenchSpec::preset(p).unwrap().validate().unwrap();
        }
        assert!(BenchSpec::preset("rhc").is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = small(vec![BalanceMode::Exact, BalanceMode::Tuned, BalanceMode::Fixed { delta: 0.05 }]);
        let s = serde_json::to_string(&spec).unwrap();
        let back: BenchSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn mismatched_estimand_rejected() {
        let mut spec = small(vec![BalanceMode::Exact]);
        spec.estimands = vec![Estimand::Att];
        assert!(spec.validate().is_err());
    }
}
