//! Weighted point estimates and the plug-in variance estimator.

use std::fmt;
use std::str::FromStr;

use log::warn;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::balance::BasisMatrix;
use crate::error::{Error, Result};
use crate::linalg::{solve_symmetric, SymSolve};

/// Standard normal 0.975 quantile.
pub const Z_975: f64 = 1.959964;

const GRAM_RIDGE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorForm {
    /// `sum w_i z_i y_i`
    #[serde(rename = "HT")]
    HorvitzThompson,
    /// `sum w_i z_i y_i / sum w_i z_i`
    #[serde(rename = "Hajek")]
    Hajek,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    /// Population mean of an outcome missing where `z = 0`.
    Mean,
    /// Average effect on the treated.
    Att,
    /// Average effect over the whole sample.
    Ate,
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimand::Mean => "mean",
            Estimand::Att => "att",
            Estimand::Ate => "ate",
        })
    }
}

impl FromStr for Estimand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Estimand::Mean),
            "att" => Ok(Estimand::Att),
            "ate" => Ok(Estimand::Ate),
            other => Err(Error::InvalidInput(format!("unknown estimand '{other}' (expected mean, att or ate)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateDiagnostics {
    /// Plug-in variance terms before dividing by `n`, one per arm.
    pub v_hat: Vec<f64>,
    pub ridge_applied: bool,
}

/// `variance` is the sampling variance of `point`, i.e. `V_K / n` (summed over
/// arms for effects).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimand: Estimand,
    pub point: f64,
    pub variance: f64,
    #[serde(with = "ci_pair")]
    pub ci: (f64, f64),
    pub form: EstimatorForm,
    pub n: usize,
    pub r: usize,
    pub diagnostics: EstimateDiagnostics,
}

impl EstimateReport {
    pub fn ci_low(&self) -> f64 {
        self.ci.0
    }

    pub fn ci_high(&self) -> f64 {
        self.ci.1
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci.0 <= truth && truth <= self.ci.1
    }
}

mod ci_pair {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(ci: &(f64, f64), s: S) -> Result<S::Ok, S::Error> {
        [ci.0, ci.1].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(f64, f64), D::Error> {
        let [lo, hi] = <[f64; 2]>::deserialize(d)?;
        Ok((lo, hi))
    }
}

fn check_lengths(n: usize, weights: &Array1<f64>, z: &[bool], y: &Array1<f64>) -> Result<()> {
    for (what, got) in [("weights length", weights.len()), ("indicator length", z.len()), ("outcome length", y.len())] {
        if got != n {
            return Err(Error::Dimension { what, expected: n, got });
        }
    }
    Ok(())
}

/// Weighted mean of outcomes over units with `z = 1`. Outcomes where `z = 0`
/// are never read and may be NaN.
pub fn weighted_mean(weights: &Array1<f64>, z: &[bool], y: &Array1<f64>, form: EstimatorForm) -> Result<f64> {
    check_lengths(weights.len(), weights, z, y)?;
    let mut total = 0.0;
    let mut mass = 0.0;
    for i in 0..weights.len() {
        if z[i] {
            if !y[i].is_finite() {
                return Err(Error::InvalidInput(format!("outcome missing for unit {i} with z = 1")));
            }
            total += weights[i] * y[i];
            mass += weights[i];
        }
    }
    match form {
        EstimatorForm::HorvitzThompson => Ok(total),
        EstimatorForm::Hajek => {
            if mass == 0.0 {
                return Err(Error::InvalidInput("Hajek estimator with zero weight mass".into()));
            }
            Ok(total / mass)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceEstimate {
    /// Plug-in asymptotic variance `V_K`.
    pub v_hat: f64,
    /// Weighted outcome regression coefficients.
    pub beta: Array1<f64>,
    pub ridge_applied: bool,
}

impl VarianceEstimate {
    /// `z_{0.975} sqrt(V_K / n)`
    pub fn half_width(&self, n: usize) -> f64 {
        Z_975 * (self.v_hat / n as f64).sqrt()
    }
}

/// Plug-in variance
///
/// ```text
/// beta = [(1/n) sum Z_i w_i B_i B_i^T]^{-1} (1/n) sum Z_i w_i B_i Y_i
/// V_K  = (1/n) sum_i [n Z_i w_i Y_i - sum_j w_j Z_j Y_j - B_i^T beta (n Z_i w_i - 1)]^2
/// ```
pub fn variance_estimate(weights: &Array1<f64>, z: &[bool], y: &Array1<f64>, basis: &BasisMatrix) -> Result<VarianceEstimate> {
    let n = basis.nrows();
    check_lengths(n, weights, z, y)?;
    let k = basis.ncols();
    let nf = n as f64;

    let mut gram = Array2::<f64>::zeros((k, k));
    let mut rhs = Array1::<f64>::zeros(k);
    let mut y_hat = 0.0;
    for (i, row) in basis.values.outer_iter().enumerate() {
        if !z[i] {
            continue;
        }
        if !y[i].is_finite() {
            return Err(Error::InvalidInput(format!("outcome missing for unit {i} with z = 1")));
        }
        let wi = weights[i];
        y_hat += wi * y[i];
        for a in 0..k {
            rhs[a] += wi * row[a] * y[i] / nf;
            for b in 0..k {
                gram[[a, b]] += wi * row[a] * row[b] / nf;
            }
        }
    }

    let (beta, ridge_applied) = match solve_symmetric(&gram, &rhs, GRAM_RIDGE) {
        SymSolve::Solved(b) => (b, false),
        SymSolve::Ridged(b, ridge) => {
            warn!("weighted Gram matrix is singular; added ridge {ridge:e}");
            (b, true)
        }
        SymSolve::Singular(null_dir) => {
            let columns = null_dir
                .iter()
                .enumerate()
                .filter(|(_, v)| v.abs() > 0.1)
                .map(|(j, _)| basis.columns[j].name.clone())
                .collect();
            return Err(Error::SingularGram { columns });
        }
    };

    let fitted = basis.values.dot(&beta);
    let mut acc = 0.0;
    for i in 0..n {
        let nzw = if z[i] { nf * weights[i] } else { 0.0 };
        let outcome_term = if z[i] { nzw * y[i] } else { 0.0 };
        let term = outcome_term - y_hat - fitted[i] * (nzw - 1.0);
        acc += term * term;
    }
    Ok(VarianceEstimate {
        v_hat: acc / nf,
        beta,
        ridge_applied,
    })
}

/// Horvitz-Thompson estimate of a population mean with its plug-in variance.
pub fn estimate_mean(weights: &Array1<f64>, z: &[bool], y: &Array1<f64>, basis: &BasisMatrix, form: EstimatorForm) -> Result<EstimateReport> {
    let point = weighted_mean(weights, z, y, form)?;
    let v = variance_estimate(weights, z, y, basis)?;
    let n = basis.nrows();
    let variance = v.v_hat / n as f64;
    let half = Z_975 * variance.sqrt();
    Ok(EstimateReport {
        estimand: Estimand::Mean,
        point,
        variance,
        ci: (point - half, point + half),
        form,
        n,
        r: z.iter().filter(|&&v| v).count(),
        diagnostics: EstimateDiagnostics {
            v_hat: vec![v.v_hat],
            ridge_applied: v.ridge_applied,
        },
    })
}

/// Difference of two Hajek-weighted arm means.
///
/// `treated_weights` live on units with `treated = true` and `control_weights`
/// on the rest. For the effect on the treated, pass uniform treated weights;
/// for the average effect, both arms should be balanced towards the
/// full-sample profile. The variance adds the per-arm plug-in variances and
/// ignores cross-arm covariance, which is an approximation.
pub fn estimate_effect(
    treated: &[bool],
    y: &Array1<f64>,
    basis: &BasisMatrix,
    treated_weights: &Array1<f64>,
    control_weights: &Array1<f64>,
    estimand: Estimand,
) -> Result<EstimateReport> {
    if estimand == Estimand::Mean {
        return Err(Error::InvalidInput("estimate_effect needs att or ate".into()));
    }
    let control: Vec<bool> = treated.iter().map(|t| !t).collect();
    let mu1 = weighted_mean(treated_weights, treated, y, EstimatorForm::Hajek)?;
    let mu0 = weighted_mean(control_weights, &control, y, EstimatorForm::Hajek)?;
    let v1 = variance_estimate(treated_weights, treated, y, basis)?;
    let v0 = variance_estimate(control_weights, &control, y, basis)?;
    let n = basis.nrows();
    let variance = (v1.v_hat + v0.v_hat) / n as f64;
    let point = mu1 - mu0;
    let half = Z_975 * variance.sqrt();
    Ok(EstimateReport {
        estimand,
        point,
        variance,
        ci: (point - half, point + half),
        form: EstimatorForm::Hajek,
        n,
        r: treated.iter().filter(|&&v| v).count(),
        diagnostics: EstimateDiagnostics {
            v_hat: vec![v1.v_hat, v0.v_hat],
            ridge_applied: v1.ridge_applied || v0.ridge_applied,
        },
    })
}

/// Uniform weights `1 / #{z = 1}` on units with `z = 1`.
pub fn uniform_weights(z: &[bool]) -> Array1<f64> {
    let r = z.iter().filter(|&&v| v).count().max(1) as f64;
    z.iter().map(|&v| if v { 1.0 / r } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn intercept_only(n: usize) -> BasisMatrix {
        BasisMatrix::from_values(Array2::ones((n, 1)), vec!["(intercept)".into()], true).unwrap()
    }

    #[test]
    fn weighted_mean_examples() {
        let w = array![0.5, 0.5];
        let z = [true, true];
        let y = array![2.0, 4.0];
        assert_eq!(weighted_mean(&w, &z, &y, EstimatorForm::HorvitzThompson).unwrap(), 3.0);
        let w2 = &w * 2.0;
        assert_eq!(
            weighted_mean(&w2, &z, &y, EstimatorForm::Hajek).unwrap(),
            weighted_mean(&w, &z, &y, EstimatorForm::Hajek).unwrap()
        );

        let w = array![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0];
        let z = [true, true, true, false];
        let y = array![3.0, 6.0, 9.0, 100.0];
        assert_abs_diff_eq!(weighted_mean(&w, &z, &y, EstimatorForm::HorvitzThompson).unwrap(), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn missing_outcomes_off_respondents_are_ignored() {
        let w = array![0.5, 0.5, 0.0];
        let z = [true, true, false];
        let y = array![1.0, 3.0, f64::NAN];
        assert_eq!(weighted_mean(&w, &z, &y, EstimatorForm::HorvitzThompson).unwrap(), 2.0);
        let y = array![f64::NAN, 3.0, 1.0];
        assert!(weighted_mean(&w, &z, &y, EstimatorForm::HorvitzThompson).is_err());
    }

    #[test]
    fn hajek_zero_mass_fails() {
        let w = array![0.0, 0.0];
        assert!(weighted_mean(&w, &[true, true], &array![1.0, 2.0], EstimatorForm::Hajek).is_err());
    }

    #[test]
    fn variance_two_unit_example() {
        let b = intercept_only(2);
        let v = variance_estimate(&array![0.5, 0.5], &[true, true], &array![2.0, 4.0], &b).unwrap();
        assert_abs_diff_eq!(v.beta[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.v_hat, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_outcome_has_zero_variance() {
        let x = array![[1.0, -0.3], [1.0, 0.8], [1.0, 1.7], [1.0, 0.2], [1.0, -1.1]];
        let b = BasisMatrix::from_values(x, vec!["(intercept)".into(), "x".into()], true).unwrap();
        let w = array![0.2, 0.5, 0.0, 0.3, 0.0];
        let z = [true, true, false, true, false];
        let y = array![4.5, 4.5, f64::NAN, 4.5, f64::NAN];
        let v = variance_estimate(&w, &z, &y, &b).unwrap();
        assert!(v.v_hat.abs() < 1e-20);
    }

    #[test]
    fn singular_gram_names_columns() {
        let x = array![[1.0, 2.0, 4.0], [1.0, 3.0, 6.0], [1.0, 1.0, 2.0]];
        let b = BasisMatrix::from_values(x, vec!["(intercept)".into(), "a".into(), "b".into()], true).unwrap();
        let w = array![0.5, 0.5, 0.0];
        let z = [true, true, false];
        let y = array![1.0, 2.0, f64::NAN];
        match variance_estimate(&w, &z, &y, &b) {
            Err(Error::SingularGram { columns }) => assert!(!columns.is_empty()),
            Ok(v) => assert!(v.ridge_applied),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn effect_with_single_treated_unit() {
        let x = array![[1.0], [1.0], [1.0], [1.0]];
        let b = BasisMatrix::from_values(x, vec!["(intercept)".into()], true).unwrap();
        let treated = [true, false, false, false];
        let y = array![10.0, 1.0, 2.0, 3.0];
        let wt = uniform_weights(&treated);
        let wc = array![0.0, 0.5, 0.25, 0.25];
        let rep = estimate_effect(&treated, &y, &b, &wt, &wc, Estimand::Att).unwrap();
        assert_abs_diff_eq!(rep.point, 10.0 - (0.5 + 0.5 + 0.75), epsilon = 1e-12);
        assert!(rep.ci_low() <= rep.point && rep.point <= rep.ci_high());
    }

    proptest! {
        #[test]
        fn hajek_scale_invariant_and_ht_linear(
            w in proptest::collection::vec(0.01f64..1.0, 5),
            y in proptest::collection::vec(-10.0f64..10.0, 5),
            c in 0.1f64..10.0,
        ) {
            let w = Array1::from(w);
            let y = Array1::from(y);
            let z = [true, false, true, true, true];
            let h1 = weighted_mean(&w, &z, &y, EstimatorForm::Hajek).unwrap();
            let h2 = weighted_mean(&(&w * c), &z, &y, EstimatorForm::Hajek).unwrap();
            prop_assert!((h1 - h2).abs() <= 1e-10 * (1.0 + h1.abs()));
            let t1 = weighted_mean(&w, &z, &y, EstimatorForm::HorvitzThompson).unwrap();
            let t2 = weighted_mean(&(&w * c), &z, &y, EstimatorForm::HorvitzThompson).unwrap();
            prop_assert!((t2 - c * t1).abs() <= 1e-10 * (1.0 + t2.abs()));
        }

        #[test]
        fn variance_is_nonnegative(
            w in proptest::collection::vec(-0.5f64..1.0, 8),
            y in proptest::collection::vec(-10.0f64..10.0, 8),
            x in proptest::collection::vec(-3.0f64..3.0, 8),
        ) {
            let mut vals = Array2::ones((8, 2));
            for i in 0..8 { vals[[i, 1]] = x[i]; }
            let b = BasisMatrix::from_values(vals, vec!["(intercept)".into(), "x".into()], true).unwrap();
            let z = [true, true, false, true, true, false, true, true];
            if let Ok(v) = variance_estimate(&Array1::from(w), &z, &Array1::from(y), &b) {
                prop_assert!(v.v_hat >= 0.0);
            }
        }
    }
}
