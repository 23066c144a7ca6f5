//! The unconstrained dual of the balancing program and its solver.
//!
//! With scores `t_j = B(X_j)^T lambda` and a target profile `m` (the
//! full-sample column means unless reweighting towards a subgroup), the dual
//! objective is
//!
//! ```text
//! F(lambda) = -sum_{j: Z_j = 1} rho(t_j) + m^T lambda + sum_k delta_k |lambda_k|
//! ```
//!
//! which for `m = (1/n) sum_j B(X_j)` is `(1/n) sum_j [-Z_j n rho(t_j) + t_j]`
//! plus the penalty. Primal weights are `w_j = rho'(t_j)` on respondents and 0
//! elsewhere. The smooth gradient `m - sum_{Z=1} rho'(t_j) B_j` is the negated
//! imbalance of those weights, so the optimality conditions of the weighted L1
//! problem are exactly the box constraints on imbalance.
//!
//! Minimization is FISTA with backtracking and function-value restart. An
//! extrapolated step that would raise `F` triggers a restart from the last
//! accepted point, so accepted objective values never increase beyond
//! rounding. Inside the rounding band the gradient restart test is used.
//!
//! When the basis has an exactly balanced intercept, iterations run with the
//! other columns centered at their targets. Weights and the objective are
//! unchanged by that shift; the reported `lambda` is in the original basis.

use std::fmt;

use log::warn;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::balance::{imbalance, BalanceTarget, BasisMatrix, TargetKind};
use crate::dispersion::DispersionSpec;
use crate::error::{Error, Result};
use crate::linalg::{eigen_rcond, to_dmatrix, SINGULAR_RCOND};

/// A dual problem over a borrowed basis.
#[derive(Clone, Debug)]
pub struct DualProblem<'a> {
    basis: &'a BasisMatrix,
    z: &'a [bool],
    target: BalanceTarget,
    delta: Array1<f64>,
    spec: DispersionSpec,
    respondents: Vec<usize>,
    /// Respondent rows of the basis, contiguous.
    design: Array2<f64>,
}

impl<'a> DualProblem<'a> {
    /// Balances respondents towards the full-sample means.
    pub fn new(basis: &'a BasisMatrix, z: &'a [bool], delta: Array1<f64>, spec: DispersionSpec) -> Result<Self> {
        let target = crate::balance::target_profile(basis, z, TargetKind::PopulationMean)?;
        Self::with_target(basis, z, target, delta, spec)
    }

    /// Balances units with `z = 1` towards an arbitrary target profile.
    pub fn with_target(
        basis: &'a BasisMatrix,
        z: &'a [bool],
        target: BalanceTarget,
        delta: Array1<f64>,
        spec: DispersionSpec,
    ) -> Result<Self> {
        let (n, k) = basis.values.dim();
        if z.len() != n {
            return Err(Error::Dimension {
                what: "indicator length",
                expected: n,
                got: z.len(),
            });
        }
        if delta.len() != k {
            return Err(Error::Dimension {
                what: "delta length",
                expected: k,
                got: delta.len(),
            });
        }
        if target.target.len() != k {
            return Err(Error::Dimension {
                what: "target length",
                expected: k,
                got: target.target.len(),
            });
        }
        if delta.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidInput("delta entries must be finite and nonnegative".into()));
        }
        if basis.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("basis has non-finite entries".into()));
        }
        let respondents: Vec<usize> = (0..n).filter(|&i| z[i]).collect();
        if respondents.is_empty() {
            return Err(Error::InvalidInput("no units with z = 1".into()));
        }
        if spec.respondents != respondents.len() || spec.sample_size != n {
            return Err(Error::InvalidInput(format!(
                "dispersion spec (r = {}, n = {}) does not match the indicator (r = {}, n = {n})",
                spec.respondents,
                spec.sample_size,
                respondents.len()
            )));
        }
        let design = basis.values.select(Axis(0), &respondents);
        Ok(DualProblem {
            basis,
            z,
            target,
            delta,
            spec,
            respondents,
            design,
        })
    }

    pub fn basis(&self) -> &BasisMatrix {
        self.basis
    }

    pub fn z(&self) -> &[bool] {
        self.z
    }

    pub fn delta(&self) -> &Array1<f64> {
        &self.delta
    }

    pub fn target(&self) -> &BalanceTarget {
        &self.target
    }

    pub fn spec(&self) -> &DispersionSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    fn check_len(&self, lambda: &Array1<f64>) -> Result<()> {
        if lambda.len() != self.dim() {
            return Err(Error::Dimension {
                what: "lambda length",
                expected: self.dim(),
                got: lambda.len(),
            });
        }
        Ok(())
    }

    /// Full objective including the weighted L1 penalty.
    pub fn objective(&self, lambda: &Array1<f64>) -> Result<f64> {
        self.check_len(lambda)?;
        Ok(self.smooth_value(lambda) + self.penalty(lambda))
    }

    /// Gradient of the smooth part.
    pub fn smooth_gradient(&self, lambda: &Array1<f64>) -> Result<Array1<f64>> {
        self.check_len(lambda)?;
        Ok(self.value_and_gradient(lambda).1)
    }

    /// Value of the smooth part.
    pub fn smooth_value(&self, lambda: &Array1<f64>) -> f64 {
        let scores = self.design.dot(lambda);
        let rho_sum: f64 = scores.iter().map(|&t| self.spec.rho_unchecked(t)).sum();
        -rho_sum + self.target.target.dot(lambda)
    }

    fn penalty(&self, lambda: &Array1<f64>) -> f64 {
        lambda.iter().zip(self.delta.iter()).map(|(l, d)| l.abs() * d).sum()
    }

    fn value_and_gradient(&self, lambda: &Array1<f64>) -> (f64, Array1<f64>) {
        smooth_value_and_gradient(&self.spec, &self.design, &self.target.target, lambda)
    }

    /// Coordinates the solver iterates in. With an exactly balanced
    /// intercept, shifting another column by a constant changes no
    /// imbalance, so each column is centered at its target; only the
    /// conditioning of the dual changes.
    fn centered(&self) -> Centered {
        let m = &self.target.target;
        let intercept = (0..self.dim()).find(|&j| {
            self.delta[j] == 0.0 && m[j] != 0.0 && self.design.column(j).iter().all(|&v| v == 1.0)
        });
        let Some(j0) = intercept else {
            return Centered {
                design: self.design.clone(),
                target: m.clone(),
                shift: None,
            };
        };
        let c: Array1<f64> = (0..self.dim()).map(|k| if k == j0 { 0.0 } else { m[k] / m[j0] }).collect();
        let mut design = self.design.clone();
        for (k, mut col) in design.columns_mut().into_iter().enumerate() {
            if k != j0 {
                col -= c[k];
            }
        }
        let target = m - &(&c * m[j0]);
        Centered {
            design,
            target,
            shift: Some((j0, c)),
        }
    }

    /// Primal weights `rho'(B_j^T lambda)` on respondents, 0 elsewhere.
    pub fn weights(&self, lambda: &Array1<f64>) -> Result<Array1<f64>> {
        self.check_len(lambda)?;
        let scores = self.design.dot(lambda);
        let mut w = Array1::zeros(self.basis.nrows());
        for (&i, &t) in self.respondents.iter().zip(scores.iter()) {
            w[i] = self.spec.rho_prime_unchecked(t);
        }
        Ok(w)
    }

    /// Whether the respondent Gram matrix is numerically singular.
    pub fn respondent_gram_singular(&self) -> bool {
        let gram = self.design.t().dot(&self.design);
        eigen_rcond(&to_dmatrix(&gram)) < SINGULAR_RCOND
    }
}

fn smooth_value_and_gradient(spec: &DispersionSpec, design: &Array2<f64>, target: &Array1<f64>, lambda: &Array1<f64>) -> (f64, Array1<f64>) {
    let scores = design.dot(lambda);
    let mut rho_sum = 0.0;
    let mut wts = Array1::zeros(scores.len());
    for (w, &t) in wts.iter_mut().zip(scores.iter()) {
        rho_sum += spec.rho_unchecked(t);
        *w = spec.rho_prime_unchecked(t);
    }
    let grad = target - &design.t().dot(&wts);
    (-rho_sum + target.dot(lambda), grad)
}

/// The dual in shifted coordinates `mu`: `lambda_k = mu_k` off the
/// intercept and `lambda_0 = mu_0 - sum_k c_k mu_k`. The penalty is unchanged
/// because the intercept carries no tolerance.
struct Centered {
    design: Array2<f64>,
    target: Array1<f64>,
    shift: Option<(usize, Array1<f64>)>,
}

impl Centered {
    fn to_lambda(&self, mu: &Array1<f64>) -> Array1<f64> {
        let mut lambda = mu.clone();
        if let Some((j0, c)) = &self.shift {
            lambda[*j0] -= c.dot(mu);
        }
        lambda
    }
}

/// `sign(v_k) max(|v_k| - thresholds_k, 0)`.
pub fn prox_weighted_l1(v: &Array1<f64>, thresholds: &Array1<f64>) -> Result<Array1<f64>> {
    if v.len() != thresholds.len() {
        return Err(Error::Dimension {
            what: "threshold length",
            expected: v.len(),
            got: thresholds.len(),
        });
    }
    if thresholds.iter().any(|t| *t < 0.0 || t.is_nan()) {
        return Err(Error::InvalidInput("thresholds must be nonnegative".into()));
    }
    Ok(soft_threshold(v, thresholds, 1.0))
}

fn soft_threshold(v: &Array1<f64>, thresholds: &Array1<f64>, scale: f64) -> Array1<f64> {
    let mut out = v.clone();
    for (o, &t) in out.iter_mut().zip(thresholds.iter()) {
        let shrunk = o.abs() - scale * t;
        *o = if shrunk > 0.0 { o.signum() * shrunk } else { 0.0 };
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Gradient-mapping tolerance, scaled by `1 + |F|`.
    pub tol: f64,
    pub max_iters: usize,
    pub initial_step: f64,
    /// Backtracking shrink factor.
    pub shrink: f64,
    /// Factor applied to the accepted step before the next backtracking pass.
    pub step_growth: f64,
    /// Objective values below this are taken as an unbounded dual.
    pub objective_floor: f64,
    /// KKT tolerance for the certificate attached to the result.
    pub kkt_tol: f64,
    /// Keep the accepted objective values in the result.
    pub record_history: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iters: 50_000,
            initial_step: 1.0,
            shrink: 0.5,
            step_growth: 1.25,
            objective_floor: -1e8,
            kkt_tol: 1e-6,
            record_history: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// Objective fell below the floor: the primal is most likely infeasible.
    Diverged,
    /// Backtracking could not find a decreasing step.
    Stalled,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIterations => "max_iterations",
            SolveStatus::Diverged => "diverged",
            SolveStatus::Stalled => "stalled",
        };
        f.write_str(s)
    }
}

/// Stationarity record for one balance constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktEntry {
    pub k: usize,
    pub name: String,
    pub lambda: f64,
    pub imbalance: f64,
    pub delta: f64,
    /// `lambda_k != 0`
    pub active: bool,
    /// sign of `lambda_k`
    pub sign: i8,
    /// `|imb - delta|`, `|imb + delta|` or `max(|imb| - delta, 0)` by sign.
    pub residual: f64,
    pub satisfied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub status: SolveStatus,
    pub gradient_mapping_norm: f64,
    pub final_step: f64,
    pub restarts: usize,
    pub negative_weights: usize,
    pub min_weight: f64,
    pub max_weight: f64,
    pub rank_deficient: bool,
    pub max_kkt_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub lambda: Array1<f64>,
    pub weights: Array1<f64>,
    pub converged: bool,
    pub iterations: usize,
    #[serde(rename = "objective")]
    pub objective_value: f64,
    pub kkt: Vec<KktEntry>,
    pub diagnostics: SolveDiagnostics,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub history: Option<Vec<f64>>,
}

impl SolveResult {
    pub fn status(&self) -> SolveStatus {
        self.diagnostics.status
    }

    /// `n w_i`, the inverse-propensity scale.
    pub fn scaled_weights(&self) -> Array1<f64> {
        &self.weights * self.weights.len() as f64
    }
}

/// Relative size of objective changes treated as rounding noise.
const RESTART_NOISE: f64 = 1e-13;

/// Minimizes the dual objective from `lambda = 0`.
///
/// Non-convergence is not an error: the result carries `converged = false`
/// and a status. A non-finite accepted iterate is a hard error.
pub fn solve_dual(problem: &DualProblem<'_>, opts: &SolverOptions) -> Result<SolveResult> {
    if !(opts.tol > 0.0 && opts.initial_step > 0.0 && opts.shrink > 0.0 && opts.shrink < 1.0) {
        return Err(Error::InvalidInput("invalid solver options".into()));
    }
    let k = problem.dim();
    let delta = problem.delta.clone();
    let coords = problem.centered();
    let value_and_gradient = |mu: &Array1<f64>| smooth_value_and_gradient(&problem.spec, &coords.design, &coords.target, mu);

    let mut x = Array1::<f64>::zeros(k);
    let (mut fx, mut gx) = value_and_gradient(&x);
    let mut obj_x = fx + problem.penalty(&x);
    let mut y = x.clone();
    let (mut fy, mut gy) = (fx, gx.clone());
    let mut theta = 1.0f64;
    let mut step = opts.initial_step;
    let mut restarts = 0usize;
    let mut history = opts.record_history.then(|| vec![obj_x]);

    if !obj_x.is_finite() {
        return Err(Error::NonFiniteIterate { iteration: 0 });
    }

    let mut status = SolveStatus::MaxIterations;
    let mut mapping_norm = gradient_mapping_norm(&x, &gx, &delta, step);
    let mut iterations = 0usize;
    if mapping_norm <= opts.tol * (1.0 + obj_x.abs()) {
        status = SolveStatus::Converged;
    }

    while status == SolveStatus::MaxIterations && iterations < opts.max_iters {
        iterations += 1;
        step *= opts.step_growth;

        // Backtracking on the quadratic upper bound at y.
        let accepted = loop {
            let candidate = soft_threshold(&(&y - &(&gy * step)), &delta, step);
            let diff = &candidate - &y;
            let (f_c, g_c) = value_and_gradient(&candidate);
            let quad = diff.dot(&diff) / (2.0 * step);
            // The smooth part is convex, so the gradient test implies the
            // quadratic bound and avoids cancellation in f_c - fy.
            let by_value = f_c <= fy + gy.dot(&diff) + quad + 4.0 * f64::EPSILON * (1.0 + fy.abs());
            let by_gradient = (&g_c - &gy).dot(&diff) <= quad;
            if f_c.is_finite() && (by_value || by_gradient) {
                break Some((candidate, f_c, g_c));
            }
            step *= opts.shrink;
            if step < 1e-30 {
                break None;
            }
        };
        let Some((x_new, f_new, g_new)) = accepted else {
            status = SolveStatus::Stalled;
            break;
        };
        if g_new.iter().any(|v| !v.is_finite()) || x_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIterate { iteration: iterations });
        }
        let obj_new = f_new + problem.penalty(&x_new);
        let new_norm = gradient_mapping_norm(&x_new, &g_new, &delta, step);
        let done = new_norm <= opts.tol * (1.0 + obj_new.abs());

        // Near the optimum, changes in F drown in rounding; there the sign of
        // (y - x_new).(x_new - x) decides whether momentum still helps.
        let noise = RESTART_NOISE * (1.0 + obj_x.abs());
        if !done && obj_new > obj_x + noise && y != x {
            // Momentum overshot: restart from the last accepted point.
            restarts += 1;
            theta = 1.0;
            y = x.clone();
            fy = fx;
            gy = gx.clone();
            continue;
        }
        let flat = (obj_new - obj_x).abs() <= noise;
        if flat && (&y - &x_new).dot(&(&x_new - &x)) > 0.0 {
            restarts += 1;
            theta = 1.0;
        }

        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let momentum = (theta - 1.0) / theta_next;
        let x_prev = std::mem::replace(&mut x, x_new);
        fx = f_new;
        gx = g_new;
        obj_x = obj_new;
        theta = theta_next;
        mapping_norm = new_norm;
        if let Some(h) = history.as_mut() {
            h.push(obj_x);
        }

        if obj_x < opts.objective_floor {
            status = SolveStatus::Diverged;
            break;
        }
        if done {
            status = SolveStatus::Converged;
            break;
        }

        y = &x + &((&x - &x_prev) * momentum);
        if momentum == 0.0 {
            fy = fx;
            gy = gx.clone();
        } else {
            let (f, g) = value_and_gradient(&y);
            if !f.is_finite() {
                // Extrapolated outside the finite region; fall back to x.
                theta = 1.0;
                y = x.clone();
                fy = fx;
                gy = gx.clone();
            } else {
                fy = f;
                gy = g;
            }
        }
    }

    let x = coords.to_lambda(&x);
    let weights = problem.weights(&x)?;
    let kkt = kkt_entries(problem, &x, &weights, opts.kkt_tol)?;
    let max_kkt_residual = kkt.iter().map(|e| e.residual).fold(0.0, f64::max);
    let respondent_weights = problem.respondents.iter().map(|&i| weights[i]);
    let negative_weights = respondent_weights.clone().filter(|w| *w < 0.0).count();
    let min_weight = respondent_weights.clone().fold(f64::INFINITY, f64::min);
    let max_weight = respondent_weights.fold(f64::NEG_INFINITY, f64::max);
    let rank_deficient = problem.respondent_gram_singular();
    if rank_deficient {
        warn!("respondent Gram matrix is numerically singular; dual solution may not be unique");
    }

    Ok(SolveResult {
        lambda: x,
        weights,
        converged: status == SolveStatus::Converged,
        iterations,
        objective_value: obj_x,
        kkt,
        diagnostics: SolveDiagnostics {
            status,
            gradient_mapping_norm: mapping_norm,
            final_step: step,
            restarts,
            negative_weights,
            min_weight,
            max_weight,
            rank_deficient,
            max_kkt_residual,
        },
        history,
    })
}

/// `||(lambda - prox(lambda - s g)) / s||_2`
fn gradient_mapping_norm(x: &Array1<f64>, grad: &Array1<f64>, delta: &Array1<f64>, step: f64) -> f64 {
    let moved = soft_threshold(&(x - &(grad * step)), delta, step);
    ((x - &moved) / step).dot(&((x - &moved) / step)).sqrt()
}

fn kkt_entries(problem: &DualProblem<'_>, lambda: &Array1<f64>, weights: &Array1<f64>, tol: f64) -> Result<Vec<KktEntry>> {
    let imb = imbalance(weights, problem.z, problem.basis, &problem.target)?;
    Ok((0..problem.dim())
        .map(|k| {
            let l = lambda[k];
            let d = problem.delta[k];
            let sign: i8 = if l > 0.0 {
                1
            } else if l < 0.0 {
                -1
            } else {
                0
            };
            let residual = match sign {
                1 => (imb[k] - d).abs(),
                -1 => (imb[k] + d).abs(),
                _ => (imb[k].abs() - d).max(0.0),
            };
            KktEntry {
                k,
                name: problem.basis.columns[k].name.clone(),
                lambda: l,
                imbalance: imb[k],
                delta: d,
                active: sign != 0,
                sign,
                residual,
                satisfied: residual <= tol,
            }
        })
        .collect())
}

/// Recomputes the stationarity report for a finished solve.
pub fn kkt_residual(result: &SolveResult, problem: &DualProblem<'_>, tol: f64) -> Result<Vec<KktEntry>> {
    problem.check_len(&result.lambda)?;
    kkt_entries(problem, &result.lambda, &result.weights, tol)
}
