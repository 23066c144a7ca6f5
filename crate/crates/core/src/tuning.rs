//! Bootstrap selection of the balance tolerance.
//!
//! For each candidate `delta` weights are solved once on the full sample. They
//! are then scored on `B` bootstrap replicates, each of `ceil(fraction * n)`
//! rows drawn with replacement from all units. A replicate's score is the l2
//! norm of its Hajek-normalized imbalances, each column measured against the
//! fixed full-sample target and divided by the full-sample sd of that column.
//! `C_S(delta)` is the mean score, and the smallest `C_S` over converged grid
//! points wins, ties going to the smaller `delta`.
//!
//! Replicate `b` draws from ChaCha20 stream `b` under the configured seed, so
//! every grid point sees the same rows and results do not depend on the
//! thread schedule.

use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{BalanceTarget, BasisMatrix};
use crate::dispersion::{linspace, DispersionSpec};
use crate::dual_solver::{solve_dual, DualProblem, SolveResult, SolveStatus, SolverOptions};
use crate::error::{Error, Result};
use crate::rng::{index_below, stream_rng};

pub const DEFAULT_GRID_POINTS: usize = 21;
pub const DEFAULT_REPLICATES: usize = 10;
pub const DEFAULT_FRACTION: f64 = 0.1;
const MAX_REDRAWS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    WithReplacement,
    /// Every replicate is the full sample in order (test hook).
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub grid: Vec<f64>,
    pub replicates: usize,
    pub replicate_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub allow_large_delta: bool,
    #[serde(default = "default_sampling")]
    pub sampling: Sampling,
}

fn default_sampling() -> Sampling {
    Sampling::WithReplacement
}

impl TuneConfig {
    /// `points` evenly spaced values on `[0, K^{-1/2}]`, `K` the number of
    /// balanced (non-intercept) columns.
    pub fn default_grid(balanced_columns: usize, points: usize) -> Vec<f64> {
        linspace(0.0, grid_ceiling(balanced_columns), points)
    }

    pub fn new(grid: Vec<f64>, seed: u64) -> Self {
        TuneConfig {
            grid,
            replicates: DEFAULT_REPLICATES,
            replicate_fraction: DEFAULT_FRACTION,
            seed,
            allow_large_delta: false,
            sampling: Sampling::WithReplacement,
        }
    }

    pub fn validate(&self, balanced_columns: usize) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidInput("tuning grid is empty".into()));
        }
        if self.grid.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidInput("tuning grid values must be finite and nonnegative".into()));
        }
        if self.grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidInput("tuning grid must be sorted ascending".into()));
        }
        let ceiling = grid_ceiling(balanced_columns);
        let max = self.grid[self.grid.len() - 1];
        if !self.allow_large_delta && max > ceiling * (1.0 + 1e-12) {
            return Err(Error::InvalidInput(format!(
                "grid maximum {max} exceeds K^(-1/2) = {ceiling}; allow_large_delta to override"
            )));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidInput("need at least one bootstrap replicate".into()));
        }
        if !(self.replicate_fraction > 0.0 && self.replicate_fraction <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "replicate fraction must lie in (0, 1], got {}",
                self.replicate_fraction
            )));
        }
        Ok(())
    }

    pub fn replicate_size(&self, n: usize) -> usize {
        ((self.replicate_fraction * n as f64).ceil() as usize).clamp(1, n.max(1))
    }
}

/// `K^{-1/2}`
pub fn grid_ceiling(balanced_columns: usize) -> f64 {
    1.0 / (balanced_columns.max(1) as f64).sqrt()
}

/// The RNG backing replicate `b`.
pub fn replicate_rng(seed: u64, b: usize) -> ChaCha20Rng {
    stream_rng(seed, b as u64)
}

/// Draws `size` row indices in `0..n` with replacement.
pub fn draw_rows(rng: &mut ChaCha20Rng, n: usize, size: usize) -> Vec<usize> {
    (0..size).map(|_| index_below(rng, n)).collect()
}

/// Rows for replicate `b`, redrawing from the same stream while the replicate
/// carries no respondent weight mass.
pub fn replicate_rows(weights: &ndarray::Array1<f64>, z: &[bool], config: &TuneConfig, b: usize) -> Result<Vec<usize>> {
    let n = z.len();
    if config.sampling == Sampling::Identity {
        return Ok((0..n).collect());
    }
    let size = config.replicate_size(n);
    let mut rng = replicate_rng(config.seed, b);
    for _ in 0..=MAX_REDRAWS {
        let rows = draw_rows(&mut rng, n, size);
        let (mass, abs_mass) = rows.iter().filter(|&&i| z[i]).fold((0.0, 0.0), |(m, a), &i| {
            (m + weights[i], a + weights[i].abs())
        });
        if abs_mass > 0.0 && mass.abs() > f64::EPSILON * abs_mass {
            return Ok(rows);
        }
    }
    Err(Error::Tuning(format!(
        "bootstrap replicate {b} had zero respondent weight mass after {MAX_REDRAWS} redraws"
    )))
}

/// Mean over replicates of the standardized Hajek imbalance norm, `C_S`.
pub fn bootstrap_balance(
    weights: &ndarray::Array1<f64>,
    z: &[bool],
    basis: &BasisMatrix,
    target: &BalanceTarget,
    config: &TuneConfig,
) -> Result<f64> {
    let n = basis.nrows();
    if weights.len() != n || z.len() != n {
        return Err(Error::Dimension {
            what: "weights/indicator length",
            expected: n,
            got: weights.len().min(z.len()),
        });
    }
    if config.replicates == 0 {
        return Err(Error::InvalidInput("need at least one bootstrap replicate".into()));
    }
    let sds = basis.column_sds();
    let k = basis.ncols();
    let mut total = 0.0;
    for b in 0..config.replicates {
        let rows = replicate_rows(weights, z, config, b)?;
        let mut num = vec![0.0; k];
        let mut mass = 0.0;
        for &i in &rows {
            if !z[i] {
                continue;
            }
            let w = weights[i];
            mass += w;
            for (acc, v) in num.iter_mut().zip(basis.values.row(i).iter()) {
                *acc += w * v;
            }
        }
        let sq: f64 = (0..k)
            .filter(|&j| sds[j] > 0.0)
            .map(|j| ((num[j] / mass - target.target[j]) / sds[j]).powi(2))
            .sum();
        total += sq.sqrt();
    }
    Ok(total / config.replicates as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunePoint {
    pub delta: f64,
    /// `None` when the solve did not converge.
    pub c_s: Option<f64>,
    pub converged: bool,
    pub status: SolveStatus,
    pub iterations: usize,
    pub max_kkt_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    #[serde(rename = "grid")]
    pub per_delta: Vec<TunePoint>,
    pub selected: f64,
    pub selected_index: usize,
}

/// Runs the grid search. Returns the tuning record and the solve at the
/// selected tolerance.
pub fn tune_delta_with_solution(
    basis: &BasisMatrix,
    z: &[bool],
    target: &BalanceTarget,
    spec: &DispersionSpec,
    solver: &SolverOptions,
    config: &TuneConfig,
) -> Result<(TuneResult, SolveResult)> {
    config.validate(basis.balanced_count())?;
    let evaluated: Vec<Result<(TunePoint, SolveResult)>> = config
        .grid
        .par_iter()
        .map(|&delta| {
            let problem = DualProblem::with_target(basis, z, target.clone(), basis.delta_vector(delta), *spec)?;
            let res = solve_dual(&problem, solver)?;
            let c_s = if res.converged {
                Some(bootstrap_balance(&res.weights, z, basis, target, config)?)
            } else {
                None
            };
            let point = TunePoint {
                delta,
                c_s,
                converged: res.converged,
                status: res.status(),
                iterations: res.iterations,
                max_kkt_residual: res.diagnostics.max_kkt_residual,
            };
            Ok((point, res))
        })
        .collect();

    let mut points = Vec::with_capacity(evaluated.len());
    let mut solves = Vec::with_capacity(evaluated.len());
    for item in evaluated {
        let (p, s) = item?;
        points.push(p);
        solves.push(s);
    }

    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        if let Some(c) = p.c_s {
            if best.is_none_or(|(_, b)| c < b) {
                best = Some((i, c));
            }
        }
    }
    let Some((idx, _)) = best else {
        let detail: Vec<String> = points.iter().map(|p| format!("delta={} status={}", p.delta, p.status)).collect();
        return Err(Error::Tuning(format!("no grid point converged: {}", detail.join("; "))));
    };
    let result = TuneResult {
        selected: points[idx].delta,
        selected_index: idx,
        per_delta: points,
    };
    Ok((result, solves.swap_remove(idx)))
}

pub fn tune_delta(
    basis: &BasisMatrix,
    z: &[bool],
    target: &BalanceTarget,
    spec: &DispersionSpec,
    solver: &SolverOptions,
    config: &TuneConfig,
) -> Result<TuneResult> {
    tune_delta_with_solution(basis, z, target, spec, solver, config).map(|(t, _)| t)
}
