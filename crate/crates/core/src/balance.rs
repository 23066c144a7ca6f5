//! Basis expansion, balance targets and weighted imbalance.

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns whose sample sd is at most this fraction of `1 + |mean|` are dropped.
const ZERO_VARIANCE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Intercept,
    Raw,
    Square,
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisColumn {
    pub name: String,
    pub kind: ColumnKind,
    pub standardized: bool,
    /// Sample sd of the column before any scaling.
    pub raw_sd: f64,
    /// Sample mean of the column before any scaling.
    pub raw_mean: f64,
}

impl BasisColumn {
    /// Sample sd of the column as stored; 1 for the intercept.
    pub fn stored_sd(&self) -> f64 {
        match (self.kind, self.standardized) {
            (ColumnKind::Intercept, _) => 1.0,
            (_, true) => 1.0,
            (_, false) => self.raw_sd,
        }
    }
}

/// Evaluated basis functions `B_k(X_i)`, one row per unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisMatrix {
    pub values: Array2<f64>,
    pub columns: Vec<BasisColumn>,
    pub has_intercept: bool,
    /// Covariates dropped for zero variance.
    pub dropped: Vec<String>,
}

impl BasisMatrix {
    /// Wraps an already evaluated basis. Column 0 must be all ones when
    /// `has_intercept` is set. No scaling is applied.
    pub fn from_values(values: Array2<f64>, names: Vec<String>, has_intercept: bool) -> Result<Self> {
        if names.len() != values.ncols() {
            return Err(Error::Dimension {
                what: "basis column names",
                expected: values.ncols(),
                got: names.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("basis has non-finite entries".into()));
        }
        if has_intercept && values.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::InvalidInput("intercept column must be constant 1".into()));
        }
        let columns = names
            .into_iter()
            .enumerate()
            .map(|(k, name)| {
                let col = values.column(k);
                let (mean, sd) = mean_sd(col.iter().copied());
                let kind = if has_intercept && k == 0 {
                    ColumnKind::Intercept
                } else {
                    ColumnKind::Raw
                };
                BasisColumn {
                    name,
                    kind,
                    standardized: false,
                    raw_sd: if kind == ColumnKind::Intercept { 1.0 } else { sd },
                    raw_mean: mean,
                }
            })
            .collect();
        Ok(BasisMatrix {
            values,
            columns,
            has_intercept,
            dropped: Vec::new(),
        })
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    /// Sample sd of every stored column (1 for the intercept).
    pub fn column_sds(&self) -> Array1<f64> {
        self.columns.iter().map(BasisColumn::stored_sd).collect()
    }

    /// Number of balanced columns excluding the intercept.
    pub fn balanced_count(&self) -> usize {
        self.ncols() - usize::from(self.has_intercept)
    }

    /// Per-column tolerances `delta * sd(B_k)`, zero on the intercept.
    pub fn delta_vector(&self, delta: f64) -> Array1<f64> {
        self.columns
            .iter()
            .map(|c| match c.kind {
                ColumnKind::Intercept => 0.0,
                _ => delta * c.stored_sd(),
            })
            .collect()
    }

    /// Rows `rows` of this basis, keeping the column metadata.
    pub fn select_rows(&self, rows: &[usize]) -> BasisMatrix {
        BasisMatrix {
            values: self.values.select(Axis(0), rows),
            columns: self.columns.clone(),
            has_intercept: self.has_intercept,
            dropped: self.dropped.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisConfig {
    /// 1 for raw covariates, 2 to add their squares.
    pub moments: u8,
    pub standardize: bool,
    pub intercept: bool,
    /// Pairwise products; only used with `moments = 2`.
    pub cross_products: bool,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            moments: 1,
            standardize: true,
            intercept: true,
            cross_products: false,
        }
    }
}

/// Builds `[1] ++ x ++ x^2 (++ x_a x_b)`, dividing each non-intercept column by
/// its sample sd when `standardize` is set. Columns are never centered.
pub fn expand_basis(covariates: ArrayView2<f64>, names: &[String], config: &BasisConfig) -> Result<BasisMatrix> {
    let (n, d) = covariates.dim();
    if d == 0 {
        return Err(Error::InvalidInput("need at least one covariate".into()));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least two units, got {n}")));
    }
    if names.len() != d {
        return Err(Error::Dimension {
            what: "covariate names",
            expected: d,
            got: names.len(),
        });
    }
    if !(1..=2).contains(&config.moments) {
        return Err(Error::InvalidInput(format!("moments must be 1 or 2, got {}", config.moments)));
    }
    if covariates.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("covariates contain non-finite entries".into()));
    }

    let mut candidates: Vec<(String, ColumnKind, Array1<f64>)> = Vec::new();
    for j in 0..d {
        candidates.push((names[j].clone(), ColumnKind::Raw, covariates.column(j).to_owned()));
    }
    if config.moments == 2 {
        for j in 0..d {
            let col = covariates.column(j).mapv(|v| v * v);
            candidates.push((format!("{}^2", names[j]), ColumnKind::Square, col));
        }
        if config.cross_products {
            for a in 0..d {
                for b in (a + 1)..d {
                    let col = &covariates.column(a) * &covariates.column(b);
                    candidates.push((format!("{}*{}", names[a], names[b]), ColumnKind::Cross, col));
                }
            }
        }
    }

    let mut columns = Vec::new();
    let mut data: Vec<Array1<f64>> = Vec::new();
    let mut dropped = Vec::new();
    if config.intercept {
        columns.push(BasisColumn {
            name: "(intercept)".into(),
            kind: ColumnKind::Intercept,
            standardized: false,
            raw_sd: 1.0,
            raw_mean: 1.0,
        });
        data.push(Array1::ones(n));
    }
    for (name, kind, col) in candidates {
        let (mean, sd) = mean_sd(col.iter().copied());
        if !(sd > ZERO_VARIANCE_TOL * (1.0 + mean.abs())) {
            warn!("dropping zero-variance basis column '{name}'");
            dropped.push(name);
            continue;
        }
        let stored = if config.standardize { col / sd } else { col };
        columns.push(BasisColumn {
            name,
            kind,
            standardized: config.standardize,
            raw_sd: sd,
            raw_mean: mean,
        });
        data.push(stored);
    }
    if columns.is_empty() {
        return Err(Error::InvalidInput("every basis column was dropped".into()));
    }

    let mut values = Array2::zeros((n, columns.len()));
    for (k, col) in data.into_iter().enumerate() {
        values.column_mut(k).assign(&col);
    }
    Ok(BasisMatrix {
        values,
        columns,
        has_intercept: config.intercept,
        dropped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Full-sample column means.
    PopulationMean,
    /// Column means over units with `z = 1`; weights then live on `z = 0`.
    TreatedMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceTarget {
    pub kind: TargetKind,
    pub target: Array1<f64>,
}

pub fn target_profile(basis: &BasisMatrix, z: &[bool], kind: TargetKind) -> Result<BalanceTarget> {
    if z.len() != basis.nrows() {
        return Err(Error::Dimension {
            what: "indicator length",
            expected: basis.nrows(),
            got: z.len(),
        });
    }
    let target = match kind {
        TargetKind::PopulationMean => basis
            .values
            .mean_axis(Axis(0))
            .ok_or_else(|| Error::InvalidInput("empty basis".into()))?,
        TargetKind::TreatedMean => {
            let rows: Vec<usize> = (0..z.len()).filter(|&i| z[i]).collect();
            if rows.is_empty() {
                return Err(Error::InvalidInput("target group is empty".into()));
            }
            basis.values.select(Axis(0), &rows).mean_axis(Axis(0)).unwrap()
        }
    };
    Ok(BalanceTarget { kind, target })
}

/// Signed imbalance `sum_i w_i z_i B_k(X_i) - target_k` for every column.
pub fn imbalance(weights: &Array1<f64>, z: &[bool], basis: &BasisMatrix, target: &BalanceTarget) -> Result<Array1<f64>> {
    let n = basis.nrows();
    if weights.len() != n {
        return Err(Error::Dimension {
            what: "weights length",
            expected: n,
            got: weights.len(),
        });
    }
    if z.len() != n {
        return Err(Error::Dimension {
            what: "indicator length",
            expected: n,
            got: z.len(),
        });
    }
    if target.target.len() != basis.ncols() {
        return Err(Error::Dimension {
            what: "target length",
            expected: basis.ncols(),
            got: target.target.len(),
        });
    }
    let mut acc = Array1::<f64>::zeros(basis.ncols());
    for (i, row) in basis.values.outer_iter().enumerate() {
        if z[i] {
            acc.scaled_add(weights[i], &row);
        }
    }
    Ok(acc - &target.target)
}

/// Mean and sample (n - 1) sd.
pub(crate) fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut count = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        count += 1;
    }
    if count == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = sum / count as f64;
    if count == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (count - 1) as f64).sqrt())
}
