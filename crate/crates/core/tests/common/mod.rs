//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the solver, the estimator or the tuning code.

#![allow(dead_code)]

use minbal::BasisMatrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Box-Muller normal, deliberately different from the crate's sampler.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// A small random instance: intercept plus `k` raw Gaussian columns, and an
/// indicator with at least `min_r` ones and one zero.
pub struct Instance {
    pub basis: BasisMatrix,
    pub z: Vec<bool>,
}

pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, k: usize, min_r: usize) -> Instance {
    loop {
        let mut values = ndarray::Array2::<f64>::ones((n, k + 1));
        for i in 0..n {
            for j in 1..=k {
                values[[i, j]] = normal(rng) + 0.3 * j as f64;
            }
        }
        let z: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.6).collect();
        let r = z.iter().filter(|&&v| v).count();
        if r < min_r || r == n {
            continue;
        }
        let mut names = vec!["(intercept)".to_string()];
        names.extend((1..=k).map(|j| format!("x{j}")));
        let basis = BasisMatrix::from_values(values, names, true).unwrap();
        return Instance { basis, z };
    }
}

fn respondent_rows(basis: &BasisMatrix, z: &[bool]) -> DMatrix<f64> {
    let rows: Vec<usize> = (0..z.len()).filter(|&i| z[i]).collect();
    let k = basis.ncols();
    DMatrix::from_fn(rows.len(), k, |a, b| basis.values[[rows[a], b]])
}

fn full_means(basis: &BasisMatrix) -> DVector<f64> {
    let n = basis.nrows() as f64;
    DVector::from_fn(basis.ncols(), |k, _| basis.values.column(k).sum() / n)
}

/// Minimizer of `sum_j (w_j - 1/r)^2` over respondents subject to
/// `R^T w = m`, via the normal equations `R^T R mu = m - R^T 1/r`.
/// Returns weights over all units (0 off respondents).
pub fn variance_qp(basis: &BasisMatrix, z: &[bool]) -> Vec<f64> {
    let r_mat = respondent_rows(basis, z);
    let r = r_mat.nrows() as f64;
    let m = full_means(basis);
    let base = DVector::from_element(r_mat.nrows(), 1.0 / r);
    let rhs = &m - r_mat.transpose() * &base;
    let gram = r_mat.transpose() * &r_mat;
    let mu = gram.lu().solve(&rhs).expect("respondent Gram matrix invertible");
    let w_resp = base + &r_mat * mu;
    scatter(z, w_resp.as_slice())
}

fn scatter(z: &[bool], resp: &[f64]) -> Vec<f64> {
    let mut it = resp.iter();
    z.iter().map(|&v| if v { *it.next().unwrap() } else { 0.0 }).collect()
}

/// Damped Newton on `G(l) = sum_j exp(-B_j^T l - 1) + m^T l`. Returns the
/// weights `exp(-B_j^T l - 1)` or `None` if Newton does not converge (target
/// outside the respondents' hull, numerically).
pub fn entropy_newton(basis: &BasisMatrix, z: &[bool]) -> Option<Vec<f64>> {
    let r_mat = respondent_rows(basis, z);
    let m = full_means(basis);
    let k = basis.ncols();
    let value = |l: &DVector<f64>| -> f64 {
        let t = &r_mat * l;
        t.iter().map(|v| (-v - 1.0).exp()).sum::<f64>() + m.dot(l)
    };
    let mut l = DVector::<f64>::zeros(k);
    for _ in 0..200 {
        let t = &r_mat * &l;
        let w = t.map(|v| (-v - 1.0).exp());
        let grad = &m - r_mat.transpose() * &w;
        if grad.norm() < 1e-13 {
            return Some(scatter(z, w.as_slice()));
        }
        let mut hess = DMatrix::<f64>::zeros(k, k);
        for j in 0..r_mat.nrows() {
            let row = r_mat.row(j).transpose();
            hess += &row * row.transpose() * w[j];
        }
        let dir = hess.cholesky()?.solve(&(-&grad));
        let f0 = value(&l);
        let slope = grad.dot(&dir);
        let mut s = 1.0;
        loop {
            let cand = &l + &dir * s;
            let f1 = value(&cand);
            if f1.is_finite() && f1 <= f0 + 1e-4 * s * slope {
                l = cand;
                break;
            }
            s *= 0.5;
            if s < 1e-20 {
                // Newton stalled at machine precision.
                let t = &r_mat * &l;
                let w = t.map(|v| (-v - 1.0).exp());
                let g = &m - r_mat.transpose() * &w;
                return (g.norm() < 1e-9).then(|| scatter(z, w.as_slice()));
            }
        }
    }
    None
}

/// Direct transcription of the plug-in variance, written without helpers:
/// beta from the weighted normal equations, then the average squared
/// influence term.
pub fn transcribed_variance(w: &[f64], z: &[bool], y: &[f64], basis: &BasisMatrix) -> f64 {
    let n = z.len();
    let nf = n as f64;
    let k = basis.ncols();
    let mut a = DMatrix::<f64>::zeros(k, k);
    let mut c = DVector::<f64>::zeros(k);
    for i in 0..n {
        if !z[i] {
            continue;
        }
        let b = DVector::from_iterator(k, basis.values.row(i).iter().copied());
        a += &b * b.transpose() * (w[i] / nf);
        c += &b * (w[i] * y[i] / nf);
    }
    let beta = a.lu().solve(&c).expect("weighted Gram invertible");
    let total: f64 = (0..n).filter(|&i| z[i]).map(|i| w[i] * y[i]).sum();
    let mut v = 0.0;
    for i in 0..n {
        let zi = if z[i] { 1.0 } else { 0.0 };
        let yi = if z[i] { y[i] } else { 0.0 };
        let fit: f64 = (0..k).map(|j| basis.values[[i, j]] * beta[j]).sum();
        let term = nf * zi * w[i] * yi - total - fit * (nf * zi * w[i] - 1.0);
        v += term * term;
    }
    v / nf
}

pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
