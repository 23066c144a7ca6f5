//! Small dense symmetric solves on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2};

/// Relative eigenvalue floor used for rank warnings.
pub const SINGULAR_RCOND: f64 = 1e-10;

const SOLVE_RCOND: f64 = 1e-12;
const RIDGED_SOLVE_RCOND: f64 = 1e-15;

pub fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Ratio of the smallest to the largest absolute eigenvalue.
pub fn eigen_rcond(a: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(a.clone());
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for v in eig.eigenvalues.iter() {
        lo = lo.min(v.abs());
        hi = hi.max(v.abs());
    }
    if hi == 0.0 {
        0.0
    } else {
        lo / hi
    }
}

pub enum SymSolve {
    Solved(Array1<f64>),
    /// Solved after adding a diagonal ridge of the given size.
    Ridged(Array1<f64>, f64),
    /// Still singular after the ridge; carries the eigenvector of the
    /// smallest eigenvalue, which names the collinear directions.
    Singular(Array1<f64>),
}

/// Solves the symmetric system `a x = b` through its eigen-decomposition.
///
/// When `a` is numerically singular a ridge of `ridge_scale * trace(a) / K` is
/// added to the diagonal and the solve retried once.
pub fn solve_symmetric(a: &Array2<f64>, b: &Array1<f64>, ridge_scale: f64) -> SymSolve {
    let k = a.nrows();
    let mat = to_dmatrix(a);
    let rhs = DVector::from_iterator(k, b.iter().copied());
    if let Some(x) = eig_solve(&mat, &rhs, SOLVE_RCOND) {
        return SymSolve::Solved(x);
    }
    let ridge = ridge_scale * mat.trace().abs() / k as f64;
    let ridged = &mat + DMatrix::<f64>::identity(k, k) * ridge;
    if let Some(x) = eig_solve(&ridged, &rhs, RIDGED_SOLVE_RCOND) {
        return SymSolve::Ridged(x, ridge);
    }
    let eig = SymmetricEigen::new(mat);
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v.abs() < acc.1 { (i, v.abs()) } else { acc });
    SymSolve::Singular(eig.eigenvectors.column(idx).iter().copied().collect())
}

fn eig_solve(a: &DMatrix<f64>, b: &DVector<f64>, rcond: f64) -> Option<Array1<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    let hi = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if hi == 0.0 || !hi.is_finite() {
        return None;
    }
    if eig.eigenvalues.iter().any(|v| v.abs() <= rcond * hi) {
        return None;
    }
    let proj = eig.eigenvectors.transpose() * b;
    let scaled = DVector::from_iterator(
        proj.len(),
        proj.iter().zip(eig.eigenvalues.iter()).map(|(p, l)| p / l),
    );
    let x = &eig.eigenvectors * scaled;
    Some(x.iter().copied().collect())
}
