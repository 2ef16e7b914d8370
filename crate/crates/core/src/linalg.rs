//! Dense helpers shared by the distribution and regression layers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative jitter scales tried in order when a Cholesky factorization fails.
pub const JITTER_SCALES: [f64; 2] = [1e-10, 1e-6];

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Column-stacking vectorization.
pub fn vectorize(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvectorize(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

fn mean_diagonal(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    (m.trace() / m.nrows() as f64).abs()
}

/// Cholesky factorization that escalates a trace-scaled diagonal jitter
/// (`JITTER_SCALES`) when the plain factorization fails.
pub fn jittered_cholesky(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    let sym = symmetrize(m);
    if let Some(chol) = Cholesky::new(sym.clone()) {
        return Ok(chol);
    }
    let scale = mean_diagonal(&sym).max(f64::MIN_POSITIVE);
    for rel in JITTER_SCALES {
        let mut jittered = sym.clone();
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += rel * scale;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok(chol);
        }
    }
    Err(Error::NotPositiveDefinite(context.to_string()))
}

/// Factor `L` with `L Lᵀ = m` for a symmetric PSD `m`, tolerating rank deficiency.
///
/// Eigenvalues down to `-1e-8 · max(1, λ_max)` are clamped to zero; anything more
/// negative is reported as a non-PSD input.
pub fn psd_factor(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Dimension(format!("{context}: factor of non-square matrix")));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if lmin < -1e-8 * lmax.max(1.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "{context}: eigenvalue {lmin:e}"
        )));
    }
    let mut factor = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(s);
    }
    Ok(factor)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

/// Max elementwise relative error `|a-b| / (1 + |b|)`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / (1.0 + y.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vectorize_is_column_major() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vectorize(&m).as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(unvectorize(&vectorize(&m), 2, 2), m);
    }

    #[test]
    fn psd_factor_handles_zero_and_rank_one() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(psd_factor(&z, "zero").unwrap().amax(), 0.0);
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let r1 = &v * v.transpose();
        let l = psd_factor(&r1, "rank1").unwrap();
        assert!(rel_err(&(&l * l.transpose()), &r1) < 1e-12);
    }

    #[test]
    fn psd_factor_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(psd_factor(&m, "indef").is_err());
    }

    #[test]
    fn jitter_rescues_singular_psd() {
        let v = DVector::from_vec(vec![1.0, 1.0]);
        let m = &v * v.transpose();
        assert!(jittered_cholesky(&m, "rank1").is_ok());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(jittered_cholesky(&neg, "neg").is_err());
    }
}
