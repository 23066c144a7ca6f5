//! Simulation designs and CSV ingestion.
//!
//! Generators consume a single ChaCha20 stream (stream 0 of `seed`) unit by
//! unit. Kang-Schafer draws `U1..U4`, the outcome noise and then one uniform
//! for the response indicator. Wong-Chan draws `Z1..Z10`, the noise and then
//! one uniform for treatment.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::rng::{standard_normal, stream_rng, uniform_open01};

/// Known generating quantities for simulated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// `P(Z = 1 | X)` for every unit.
    pub propensity: Array1<f64>,
    /// Population mean of the outcome, for missing-data designs.
    pub target_mean: Option<f64>,
    /// Potential outcomes, for treatment designs.
    pub y1: Option<Array1<f64>>,
    pub y0: Option<Array1<f64>>,
}

impl Truth {
    /// Sample average effect `mean(y1 - y0)`.
    pub fn ate(&self) -> Option<f64> {
        let (y1, y0) = (self.y1.as_ref()?, self.y0.as_ref()?);
        Some((y1 - y0).mean().unwrap_or(f64::NAN))
    }

    /// Sample average effect over units with `z = 1`.
    pub fn att(&self, z: &[bool]) -> Option<f64> {
        let (y1, y0) = (self.y1.as_ref()?, self.y0.as_ref()?);
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..z.len() {
            if z[i] {
                sum += y1[i] - y0[i];
                count += 1;
            }
        }
        (count > 0).then(|| sum / count as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub names: Vec<String>,
    pub z: Vec<bool>,
    /// Observed outcomes; NaN where `z = 0` in missing-data designs. `None`
    /// for outcome-free inputs.
    pub y: Option<Array1<f64>>,
    pub truth: Option<Truth>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn respondents(&self) -> usize {
        self.z.iter().filter(|&&v| v).count()
    }

    /// Writes `names..., z, y[, pi]` with a header. Missing outcomes are
    /// written as empty fields.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = self.names.clone();
        header.push("z".into());
        if self.y.is_some() {
            header.push("y".into());
        }
        let pi = self.truth.as_ref().map(|t| &t.propensity);
        if pi.is_some() {
            header.push("pi".into());
        }
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format_f64(*v)).collect();
            rec.push(if self.z[i] { "1".into() } else { "0".into() });
            if let Some(y) = &self.y {
                rec.push(if y[i].is_nan() { String::new() } else { format_f64(y[i]) });
            }
            if let Some(p) = pi {
                rec.push(format_f64(p[i]));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Shortest representation that parses back to the same `f64`.
fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(DataError::Csv(format!("{other:?}"))),
    }
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Overlap {
    Good,
    Bad,
}

impl FromStr for Overlap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "good" => Ok(Overlap::Good),
            "bad" => Ok(Overlap::Bad),
            other => Err(Error::InvalidInput(format!("unknown overlap '{other}' (expected good or bad)"))),
        }
    }
}

impl fmt::Display for Overlap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Overlap::Good => "good",
            Overlap::Bad => "bad",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutcomeModel {
    A,
    B,
}

impl FromStr for OutcomeModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(OutcomeModel::A),
            "B" | "b" => Ok(OutcomeModel::B),
            other => Err(Error::InvalidInput(format!("unknown outcome model '{other}' (expected A or B)"))),
        }
    }
}

impl fmt::Display for OutcomeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutcomeModel::A => "A",
            OutcomeModel::B => "B",
        })
    }
}

/// Kang-Schafer missing-outcome design. The response probability is the
/// logistic function of the linear index
/// `-U1 - 2 U2 - 0.25 U3 - 0.1 U4` (good overlap) or
/// `-U1 - 0.5 U2 - 0.25 U3 - 0.1 U4` (bad overlap).
pub fn gen_kang_schafer(n: usize, overlap: Overlap, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("need n >= 2, got {n}")));
    }
    let b2 = match overlap {
        Overlap::Good => 2.0,
        Overlap::Bad => 0.5,
    };
    let mut rng = stream_rng(seed, 0);
    let mut x = Array2::<f64>::zeros((n, 4));
    let mut y = Array1::<f64>::zeros(n);
    let mut pi = Array1::<f64>::zeros(n);
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        let u: [f64; 4] = std::array::from_fn(|_| standard_normal(&mut rng));
        let eps = standard_normal(&mut rng);
        x[[i, 0]] = (u[0] / 2.0).exp();
        x[[i, 1]] = u[1] / (1.0 + u[0].exp()) + 10.0;
        x[[i, 2]] = (u[0] * u[2] + 0.6).powi(3);
        x[[i, 3]] = (u[1] + u[3] + 20.0).powi(2);
        let yi = 210.0 + 27.4 * u[0] + 13.7 * (u[1] + u[2] + u[3]) + eps;
        let p = logistic(-u[0] - b2 * u[1] - 0.25 * u[2] - 0.1 * u[3]);
        let zi = uniform_open01(&mut rng) < p;
        pi[i] = p;
        y[i] = if zi { yi } else { f64::NAN };
        z.push(zi);
    }
    Ok(Dataset {
        x,
        names: (1..=4).map(|j| format!("x{j}")).collect(),
        z,
        y: Some(y),
        truth: Some(Truth {
            propensity: pi,
            target_mean: Some(210.0),
            y1: None,
            y0: None,
        }),
    })
}

/// Wong-Chan treatment design with ten latent Gaussians. Both potential
/// outcomes share the unit's noise draw.
pub fn gen_wong_chan(n: usize, model: OutcomeModel, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("need n >= 2, got {n}")));
    }
    let mut rng = stream_rng(seed, 0);
    let mut x = Array2::<f64>::zeros((n, 10));
    let mut y = Array1::<f64>::zeros(n);
    let mut y1 = Array1::<f64>::zeros(n);
    let mut y0 = Array1::<f64>::zeros(n);
    let mut pi = Array1::<f64>::zeros(n);
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        let l: [f64; 10] = std::array::from_fn(|_| standard_normal(&mut rng));
        let eps = standard_normal(&mut rng);
        x[[i, 0]] = (l[0] / 2.0).exp();
        x[[i, 1]] = l[1] / (1.0 + l[0].exp());
        x[[i, 2]] = (l[0] * l[2] / 25.0 + 0.6).powi(3);
        x[[i, 3]] = (l[1] + l[3] + 20.0).powi(2);
        for j in 4..10 {
            x[[i, j]] = l[j];
        }
        let p = logistic(-l[0] - 0.1 * l[3]);
        let t = uniform_open01(&mut rng) < p;
        let (o1, o0) = match model {
            OutcomeModel::A => {
                let s = 27.4 * l[0] + 13.7 * l[1] + 13.7 * l[2] + 13.7 * l[3];
                (210.0 + s + eps, 210.0 - 0.5 * s + eps)
            }
            OutcomeModel::B => {
                let v = l[0] * l[1].powi(3) * l[2].powi(2) * l[3] + l[3] * l[0].abs().sqrt() + eps;
                (v, v)
            }
        };
        pi[i] = p;
        y1[i] = o1;
        y0[i] = o0;
        y[i] = if t { o1 } else { o0 };
        z.push(t);
    }
    Ok(Dataset {
        x,
        names: (1..=10).map(|j| format!("x{j}")).collect(),
        z,
        y: Some(y),
        truth: Some(Truth {
            propensity: pi,
            target_mean: None,
            y1: Some(y1),
            y0: Some(y0),
        }),
    })
}

/// Header row of a CSV file.
pub fn read_headers(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(f);
    let headers: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if headers.iter().all(String::is_empty) {
        return Err(DataError::Empty(path.display().to_string()).into());
    }
    Ok(headers)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub z_column: String,
    pub y_column: Option<String>,
    pub covariate_columns: Vec<String>,
}

fn is_missing(field: &str) -> bool {
    matches!(field, "" | "NA" | "NaN" | "nan")
}

/// Reads a comma-separated file with a header row. Row numbers in errors
/// count data rows from 1.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_csv(f, schema, &path.display().to_string())
}

pub fn read_csv<R: Read>(input: R, schema: &CsvSchema, source: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.is_empty() {
        return Err(DataError::Empty(source.to_string()).into());
    }
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()).into())
    };
    let z_idx = find(&schema.z_column)?;
    let y_idx = schema.y_column.as_deref().map(find).transpose()?;
    let x_idx: Vec<usize> = schema.covariate_columns.iter().map(|c| find(c)).collect::<Result<_>>()?;
    if x_idx.is_empty() {
        return Err(Error::InvalidInput("no covariate columns in schema".into()));
    }

    let d = x_idx.len();
    let mut xs: Vec<f64> = Vec::new();
    let mut z = Vec::new();
    let mut y = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(csv_err)?;
        let field = |idx: usize| rec.get(idx).unwrap_or("");
        let parse = |idx: usize, column: &str| -> Result<f64> {
            let s = field(idx);
            s.parse::<f64>().map_err(|_| {
                DataError::Parse {
                    row,
                    column: column.to_string(),
                    value: s.to_string(),
                }
                .into()
            })
        };
        let zi = match field(z_idx) {
            "1" => true,
            "0" => false,
            other => {
                return Err(DataError::Parse {
                    row,
                    column: schema.z_column.clone(),
                    value: other.to_string(),
                }
                .into())
            }
        };
        for (&idx, name) in x_idx.iter().zip(&schema.covariate_columns) {
            let s = field(idx);
            let v = if is_missing(s) { f64::NAN } else { parse(idx, name)? };
            if !v.is_finite() {
                return Err(DataError::NonFinite { row, column: name.clone() }.into());
            }
            xs.push(v);
        }
        if let (Some(idx), Some(name)) = (y_idx, schema.y_column.as_ref()) {
            let s = field(idx);
            let v = if is_missing(s) { f64::NAN } else { parse(idx, name)? };
            if zi && !v.is_finite() {
                return Err(DataError::NonFinite { row, column: name.clone() }.into());
            }
            y.push(if v.is_finite() { v } else { f64::NAN });
        }
        z.push(zi);
    }
    let n = z.len();
    if n == 0 {
        return Err(DataError::Empty(source.to_string()).into());
    }
    let x = Array2::from_shape_vec((n, d), xs).expect("row-major covariates");
    Ok(Dataset {
        x,
        names: schema.covariate_columns.clone(),
        z,
        y: y_idx.map(|_| Array1::from(y)),
        truth: None,
    })
}
