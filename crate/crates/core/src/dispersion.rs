//! Dispersion measures and their dual transforms.
//!
//! For a separable dispersion `f` the dual of the balancing program is driven
//! by the transform
//!
//! ```text
//! rho(t) = t/n - t (h')^{-1}(t) + h((h')^{-1}(t)),   h(x) = f(1/n - x)
//! ```
//!
//! whose derivative `rho'(t)` maps a dual score `t = B(x)^T lambda` to the
//! primal weight. `rho` and `rho'` are evaluated in closed form; the
//! definitional route through a numerical inverse of `h'` lives only in
//! [`check_conjugacy`].
//!
//! A useful identity, valid for every kind here: with `w = rho'(t)`,
//! `rho(t) = t w + f(w)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DispersionKind {
    /// `f(w) = (w - 1/r)^2`
    #[serde(rename = "variance")]
    Variance,
    /// `f(w) = w log w`
    #[serde(rename = "entropy")]
    NegativeEntropy,
    /// `|w - 1/r|` with an epsilon-Huber kink plus a unit quadratic tail term
    /// `(w - 1/r)^2 / 2`. The tail term keeps `f'` onto the real line so the
    /// dual transform is defined everywhere.
    #[serde(rename = "absdev")]
    SmoothedAbsoluteDeviation,
}

impl DispersionKind {
    pub const ALL: [DispersionKind; 3] = [
        DispersionKind::Variance,
        DispersionKind::NegativeEntropy,
        DispersionKind::SmoothedAbsoluteDeviation,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            DispersionKind::Variance => "variance",
            DispersionKind::NegativeEntropy => "entropy",
            DispersionKind::SmoothedAbsoluteDeviation => "absdev",
        }
    }
}

impl fmt::Display for DispersionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for DispersionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(DispersionKind::Variance),
            "entropy" => Ok(DispersionKind::NegativeEntropy),
            "absdev" => Ok(DispersionKind::SmoothedAbsoluteDeviation),
            other => Err(Error::InvalidInput(format!(
                "unknown dispersion '{other}' (expected variance, entropy or absdev)"
            ))),
        }
    }
}

/// A dispersion measure bound to a sample: `r` respondents out of `n` units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionSpec {
    pub kind: DispersionKind,
    pub respondents: usize,
    pub sample_size: usize,
    /// Huber half-width; only read by the smoothed absolute deviation.
    pub epsilon: f64,
}

impl DispersionSpec {
    pub fn new(kind: DispersionKind, respondents: usize, sample_size: usize) -> Result<Self> {
        Self::with_epsilon(kind, respondents, sample_size, DEFAULT_EPSILON)
    }

    pub fn with_epsilon(
        kind: DispersionKind,
        respondents: usize,
        sample_size: usize,
        epsilon: f64,
    ) -> Result<Self> {
        if respondents == 0 {
            return Err(Error::InvalidInput("respondent count must be positive".into()));
        }
        if respondents > sample_size {
            return Err(Error::InvalidInput(format!(
                "respondent count {respondents} exceeds sample size {sample_size}"
            )));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(DispersionSpec {
            kind,
            respondents,
            sample_size,
            epsilon,
        })
    }

    /// Spec whose `r` and `n` are read off an indicator vector.
    pub fn for_indicator(kind: DispersionKind, z: &[bool], epsilon: f64) -> Result<Self> {
        let r = z.iter().filter(|&&v| v).count();
        Self::with_epsilon(kind, r, z.len(), epsilon)
    }

    fn center(&self) -> f64 {
        1.0 / self.respondents as f64
    }

    /// Closed-form `rho(t)`.
    pub fn rho(&self, t: f64) -> Result<f64> {
        check_finite(t)?;
        Ok(self.rho_unchecked(t))
    }

    /// Closed-form `rho'(t)`; the primal weight attached to dual score `t`.
    pub fn rho_prime(&self, t: f64) -> Result<f64> {
        check_finite(t)?;
        Ok(self.rho_prime_unchecked(t))
    }

    /// Dispersion contribution `f(w)` of a single weight.
    pub fn primal_f(&self, w: f64) -> Result<f64> {
        check_finite(w)?;
        if self.kind == DispersionKind::NegativeEntropy && w <= 0.0 {
            return Err(Error::Domain(format!("negative entropy needs w > 0, got {w}")));
        }
        Ok(self.primal_f_unchecked(w))
    }

    pub(crate) fn rho_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            DispersionKind::Variance => -t * t / 4.0 + t * self.center(),
            DispersionKind::NegativeEntropy => -(-t - 1.0).exp(),
            DispersionKind::SmoothedAbsoluteDeviation => {
                let w = self.rho_prime_unchecked(t);
                t * w + self.primal_f_unchecked(w)
            }
        }
    }

    pub(crate) fn rho_prime_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            DispersionKind::Variance => -t / 2.0 + self.center(),
            DispersionKind::NegativeEntropy => (-t - 1.0).exp(),
            DispersionKind::SmoothedAbsoluteDeviation => {
                // Invert f'(w) = -t. With u = w - 1/r and s = -t:
                // |s| <= 1 + eps  =>  u = s eps / (1 + eps)
                // otherwise       =>  u = s - sign(s)
                let s = -t;
                let eps = self.epsilon;
                let u = if s.abs() <= 1.0 + eps {
                    s * eps / (1.0 + eps)
                } else {
                    s - s.signum()
                };
                self.center() + u
            }
        }
    }

    pub(crate) fn primal_f_unchecked(&self, w: f64) -> f64 {
        match self.kind {
            DispersionKind::Variance => (w - self.center()).powi(2),
            DispersionKind::NegativeEntropy => {
                if w == 0.0 {
                    0.0
                } else {
                    w * w.ln()
                }
            }
            DispersionKind::SmoothedAbsoluteDeviation => {
                let u = w - self.center();
                huber(u, self.epsilon) + 0.5 * u * u
            }
        }
    }

    /// `f'(w)`, used only by the conjugacy oracle.
    fn primal_f_prime(&self, w: f64) -> f64 {
        match self.kind {
            DispersionKind::Variance => 2.0 * (w - self.center()),
            DispersionKind::NegativeEntropy => w.ln() + 1.0,
            DispersionKind::SmoothedAbsoluteDeviation => {
                let u = w - self.center();
                (u / self.epsilon).clamp(-1.0, 1.0) + u
            }
        }
    }

    fn h(&self, x: f64) -> f64 {
        self.primal_f_unchecked(1.0 / self.sample_size as f64 - x)
    }

    fn h_prime(&self, x: f64) -> f64 {
        -self.primal_f_prime(1.0 / self.sample_size as f64 - x)
    }

    /// Supremum of the domain of `h` (entropy needs `1/n - x > 0`).
    fn h_domain_upper(&self) -> Option<f64> {
        match self.kind {
            DispersionKind::NegativeEntropy => Some(1.0 / self.sample_size as f64),
            _ => None,
        }
    }
}

fn huber(u: f64, eps: f64) -> f64 {
    if u.abs() <= eps {
        u * u / (2.0 * eps)
    } else {
        u.abs() - eps / 2.0
    }
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite argument {v}")))
    }
}

/// Worst-case agreement between the closed forms and the definitional route.
#[derive(Clone, Debug, Serialize)]
pub struct ConjugacyReport {
    pub kind: DispersionKind,
    pub points: usize,
    /// max |rho_closed(t) - rho_def(t)|
    pub max_rho_discrepancy: f64,
    /// max |rho'(t) - (1/n - (h')^{-1}(t))|
    pub max_rho_prime_discrepancy: f64,
    pub worst_t: f64,
}

impl ConjugacyReport {
    pub fn max_discrepancy(&self) -> f64 {
        self.max_rho_discrepancy.max(self.max_rho_prime_discrepancy)
    }
}

/// Evaluates `rho` through its definition, inverting `h'` by bisection, and
/// compares it with the closed forms on `grid`.
pub fn check_conjugacy(spec: &DispersionSpec, grid: &[f64]) -> Result<ConjugacyReport> {
    let n = spec.sample_size as f64;
    let mut report = ConjugacyReport {
        kind: spec.kind,
        points: grid.len(),
        max_rho_discrepancy: 0.0,
        max_rho_prime_discrepancy: 0.0,
        worst_t: f64::NAN,
    };
    let mut worst = -1.0;
    for &t in grid {
        check_finite(t)?;
        let x = invert_h_prime(spec, t)?;
        let rho_def = t / n - t * x + spec.h(x);
        let rho_prime_def = 1.0 / n - x;
        let d_rho = (spec.rho_unchecked(t) - rho_def).abs();
        let d_prime = (spec.rho_prime_unchecked(t) - rho_prime_def).abs();
        report.max_rho_discrepancy = report.max_rho_discrepancy.max(d_rho);
        report.max_rho_prime_discrepancy = report.max_rho_prime_discrepancy.max(d_prime);
        if d_rho.max(d_prime) > worst {
            worst = d_rho.max(d_prime);
            report.worst_t = t;
        }
    }
    Ok(report)
}

/// Solves `h'(x) = t` by bisection. `h'` is increasing since `h` is convex.
fn invert_h_prime(spec: &DispersionSpec, t: f64) -> Result<f64> {
    const MAX_EXPANSIONS: usize = 1100;
    let bracket_err = |reason: &str| Error::Bracket {
        t,
        reason: reason.to_string(),
    };

    let (mut lo, mut hi) = match spec.h_domain_upper() {
        Some(upper) => {
            // Walk the upper end towards the domain boundary, the lower end away.
            let mut gap = 1.0;
            let mut hi = upper - gap;
            let mut found = false;
            for _ in 0..MAX_EXPANSIONS {
                if spec.h_prime(hi) >= t {
                    found = true;
                    break;
                }
                gap *= 0.5;
                hi = upper - gap;
                if gap == 0.0 || hi >= upper {
                    break;
                }
            }
            if !found {
                return Err(bracket_err("h' stays below t up to the domain boundary"));
            }
            let mut width = 1.0;
            let mut lo = upper - width;
            let mut found = false;
            for _ in 0..MAX_EXPANSIONS {
                if spec.h_prime(lo) <= t {
                    found = true;
                    break;
                }
                width *= 2.0;
                lo = upper - width;
                if !lo.is_finite() {
                    break;
                }
            }
            if !found {
                return Err(bracket_err("h' stays above t on the whole lower half-line"));
            }
            (lo, hi)
        }
        None => {
            let mut lo = -1.0;
            let mut hi = 1.0;
            let mut expansions = 0;
            while !(spec.h_prime(lo) <= t && spec.h_prime(hi) >= t) {
                lo *= 2.0;
                hi *= 2.0;
                expansions += 1;
                if expansions > MAX_EXPANSIONS || !lo.is_finite() {
                    return Err(bracket_err("no sign change of h'(x) - t found"));
                }
            }
            (lo, hi)
        }
    };

    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if spec.h_prime(mid) < t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `count` evenly spaced points on `[a, b]`.
pub fn linspace(a: f64, b: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..count)
            .map(|i| a + (b - a) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}
