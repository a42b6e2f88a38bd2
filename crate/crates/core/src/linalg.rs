//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric eigendecomposition with eigenvalues sorted descending.
///
/// Ties keep the solver's order. Each eigenvector is signed so that its
/// largest-magnitude entry is positive (first such entry on exact ties).
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Dimension(format!("expected square matrix, got {}x{}", n, m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let sym = 0.5 * (m + m.transpose());
    let eig = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (c, &i) in idx.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        let mut best = 0;
        for r in 1..n {
            if col[r].abs() > col[best].abs() {
                best = r;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
        vecs.set_column(c, &col);
    }
    Ok((vals, vecs))
}

/// `U f(Λ) Uᵀ` for a decomposition `(Λ, U)`.
pub fn spectral_map(vals: &DVector<f64>, vecs: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut scaled = vecs.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(vals[j]);
    }
    scaled * vecs.transpose()
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(0.5 * (m + m.transpose()))
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))?;
    let inv = chol.inverse();
    Ok(0.5 * (&inv + inv.transpose()))
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(0.5 * (m + m.transpose()))
        .map(|c| c.l())
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}
