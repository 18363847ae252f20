//! Thin wrappers over nalgebra for the small dense systems the estimator
//! needs: p x p information solves with a condition guard, and the m x m
//! reference solve of the discrete Fredholm system.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solve `A x = b` for a small square system, failing when the reciprocal
/// condition number (from the SVD) drops below `rcond_min`.
pub fn solve_guarded(a: &DMatrix<f64>, b: &DVector<f64>, rcond_min: f64) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    if !rcond.is_finite() || rcond < rcond_min {
        return Err(Error::SingularInformation { rcond });
    }
    svd.solve(b, 0.0)
        .map_err(|e| Error::Domain(format!("svd solve failed: {e}")))
}

pub fn invert_guarded(a: &DMatrix<f64>, rcond_min: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    if !rcond.is_finite() || rcond < rcond_min {
        return Err(Error::SingularInformation { rcond });
    }
    svd.solve(&DMatrix::identity(n, n), 0.0)
        .map_err(|e| Error::Domain(format!("svd solve failed: {e}")))
}

/// Solve a symmetric tridiagonal system by the Thomas algorithm.
/// `diag` has length m, `off` (the common sub/super diagonal) length m-1.
pub fn solve_sym_tridiagonal(diag: &[f64], off: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let m = diag.len();
    assert_eq!(off.len() + 1, m);
    assert_eq!(rhs.len(), m);
    let mut d = diag.to_vec();
    let mut r = rhs.to_vec();
    for i in 1..m {
        if d[i - 1] == 0.0 {
            return Err(Error::Domain("zero pivot in tridiagonal solve".into()));
        }
        let w = off[i - 1] / d[i - 1];
        d[i] -= w * off[i - 1];
        r[i] -= w * r[i - 1];
    }
    let mut x = vec![0.0; m];
    if d[m - 1] == 0.0 {
        return Err(Error::Domain("zero pivot in tridiagonal solve".into()));
    }
    x[m - 1] = r[m - 1] / d[m - 1];
    for i in (0..m - 1).rev() {
        x[i] = (r[i] - off[i] * x[i + 1]) / d[i];
    }
    Ok(x)
}

/// Max-norm relative difference between two vectors, with an absolute floor
/// for near-zero references.
#[cfg_attr(not(test), allow(dead_code))]
pub fn rel_diff_inf(a: &[f64], b: &[f64]) -> f64 {
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tridiagonal_matches_dense() {
        let diag = [4.0, 5.0, 6.0, 5.0];
        let off = [1.0, -0.5, 2.0];
        let rhs = [1.0, 0.0, -2.0, 3.0];
        let x = solve_sym_tridiagonal(&diag, &off, &rhs).unwrap();
        let mut a = DMatrix::zeros(4, 4);
        for i in 0..4 {
            a[(i, i)] = diag[i];
            if i + 1 < 4 {
                a[(i, i + 1)] = off[i];
                a[(i + 1, i)] = off[i];
            }
        }
        let xd = solve_guarded(&a, &DVector::from_row_slice(&rhs), 1e-14).unwrap();
        for i in 0..4 {
            assert_relative_eq!(x[i], xd[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_row_slice(&[1.0, 1.0]);
        assert!(matches!(
            solve_guarded(&a, &b, 1e-12),
            Err(Error::SingularInformation { .. })
        ));
    }
}
