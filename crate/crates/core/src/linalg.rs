use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const EIGEN_MAX_ITERS: usize = 10_000;

/// Eigendecomposition of the symmetric part of `m`.
pub fn sym_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !m.is_square() {
        return Err(Error::InvalidInput(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "eigensolver input contains non-finite entries".into(),
        ));
    }
    let sym = symmetrize(m);
    let dim = sym.nrows();
    SymmetricEigen::try_new(sym, f64::EPSILON, EIGEN_MAX_ITERS).ok_or_else(|| {
        Error::Numerical(format!(
            "symmetric eigensolver did not converge on a {dim}x{dim} matrix"
        ))
    })
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    Ok(sym_eigen(m)?.eigenvalues.min())
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

/// `(a - b)ᵀ M (a - b)` evaluated entry by entry.
pub fn quad_form_diff(m: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let d = a.len();
    let mut acc = 0.0;
    for i in 0..d {
        let di = a[i] - b[i];
        if di == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for j in 0..d {
            row += m[(i, j)] * (a[j] - b[j]);
        }
        acc += di * row;
    }
    acc
}

/// `aᵀ M b` evaluated entry by entry.
pub fn bilinear_form(m: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let mut row = 0.0;
        for j in 0..b.len() {
            row += m[(i, j)] * b[j];
        }
        acc += a[i] * row;
    }
    acc
}

pub fn squared_distance(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quad_form_matches_matrix_product() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let a = DVector::from_vec(vec![1.0, -1.0]);
        let b = DVector::from_vec(vec![0.0, 2.0]);
        let diff = &a - &b;
        let expected = (diff.transpose() * &m * &diff)[(0, 0)];
        assert!((quad_form_diff(&m, &a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn eigen_rejects_nan() {
        let m = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(sym_eigen(&m), Err(Error::Numerical(_))));
    }
}
