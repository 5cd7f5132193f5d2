//! Small dense linear-algebra helpers over nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = a`.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::degenerate("matrix has non-finite entries"));
    }
    a.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::degenerate("matrix is not positive definite"))
}

/// Inverse of a lower-triangular matrix with nonzero diagonal.
pub fn invert_lower(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    let mut out = DMatrix::<f64>::identity(n, n);
    if !l.solve_lower_triangular_mut(&mut out) {
        return Err(Error::degenerate("triangular factor is singular"));
    }
    Ok(out)
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Replaces eigenvalues below `floor` by `floor`. Returns the input unchanged
/// (apart from symmetrization) when no eigenvalue needs flooring.
pub fn floor_eigenvalues(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let mut sym = a.clone();
    symmetrize(&mut sym);
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let mut sym = a.clone();
    symmetrize(&mut sym);
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// `log |Σ|` from a Cholesky factor.
pub fn log_det_from_cholesky(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Squared Mahalanobis distance `(x − μ)ᵀ Σ⁻¹ (x − μ)` given the lower factor of Σ.
pub fn mahalanobis_sq(l: &DMatrix<f64>, x: &[f64], mean: &DVector<f64>) -> f64 {
    let d = DVector::from_iterator(x.len(), x.iter().zip(mean.iter()).map(|(a, b)| a - b));
    match l.solve_lower_triangular(&d) {
        Some(w) => w.norm_squared(),
        None => f64::INFINITY,
    }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = cholesky_lower(&a).unwrap();
        assert!(max_abs_diff(&(&l * l.transpose()), &a) < 1e-14);
        assert_eq!(l[(0, 1)], 0.0);
        let li = invert_lower(&l).unwrap();
        assert!(max_abs_diff(&(&li * &l), &DMatrix::identity(2, 2)) < 1e-14);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky_lower(&a), Err(Error::NumericalDegeneracy(_))));
    }

    #[test]
    fn eigen_floor_lifts_small_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = floor_eigenvalues(&a, 1e-3);
        assert!(min_eigenvalue(&f) >= 1e-3 - 1e-12);
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(floor_eigenvalues(&b, 1e-6), b);
    }
}
