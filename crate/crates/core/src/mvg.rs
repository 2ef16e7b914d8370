//! Matrix-normal distributions `MN(M, A, B)` over `n × p` matrices.
//!
//! `A` is the row covariance and `B` the column covariance, so that
//! `vec(X) ~ N(vec(M), B ⊗ A)` with column-stacking `vec`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, jittered_cholesky, min_eigenvalue, psd_factor, vectorize};

const SYM_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

fn check_cov(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !is_symmetric(m, SYM_TOL) {
        return Err(Error::InvalidParameter(format!("{what} is not symmetric")));
    }
    if m.nrows() > 0 && min_eigenvalue(m) < -PSD_TOL * (1.0 + m.amax()) {
        return Err(Error::NotPositiveDefinite(format!("{what} has a negative eigenvalue")));
    }
    Ok(())
}

/// Multivariate Gaussian, used as the vectorized form of a [`MatrixNormal`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianVec {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianVec {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension(format!(
                "gaussian with mean of length {} and covariance {:?}",
                mean.len(),
                cov.shape()
            )));
        }
        check_cov(&cov, "gaussian covariance")?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn logpdf(&self, x: &DVector<f64>) -> Result<f64> {
        let chol = jittered_cholesky(&self.cov, "gaussian covariance")?;
        let r = x - &self.mean;
        let sol = chol.solve(&r);
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let d = self.dim() as f64;
        Ok(-0.5 * (r.dot(&sol) + logdet + d * (2.0 * std::f64::consts::PI).ln()))
    }

    pub fn sample(&self, seed: u64, count: usize) -> Result<Vec<DVector<f64>>> {
        let l = psd_factor(&self.cov, "gaussian covariance")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..count)
            .map(|_| {
                let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(&mut rng));
                &self.mean + &l * z
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixNormal {
    pub mean: DMatrix<f64>,
    pub row_cov: DMatrix<f64>,
    pub col_cov: DMatrix<f64>,
}

impl MatrixNormal {
    pub fn new(mean: DMatrix<f64>, row_cov: DMatrix<f64>, col_cov: DMatrix<f64>) -> Result<Self> {
        let (n, p) = mean.shape();
        if row_cov.shape() != (n, n) || col_cov.shape() != (p, p) {
            return Err(Error::Dimension(format!(
                "matrix normal mean {:?} with row cov {:?} and col cov {:?}",
                mean.shape(),
                row_cov.shape(),
                col_cov.shape()
            )));
        }
        check_cov(&row_cov, "row covariance")?;
        check_cov(&col_cov, "column covariance")?;
        Ok(Self {
            mean,
            row_cov,
            col_cov,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mean.shape()
    }

    /// `vec(X) ~ N(vec(M), B ⊗ A)`.
    pub fn vectorize(&self) -> GaussianVec {
        GaussianVec {
            mean: vectorize(&self.mean),
            cov: self.col_cov.kronecker(&self.row_cov),
        }
    }

    /// Distribution of `C X D` together with `cov(vec(C X D), vec(X))`.
    ///
    /// Either factor may be omitted (identity). The cross covariance equals
    /// `(Dᵀ B) ⊗ (C A)`.
    pub fn linear_transform(
        &self,
        left: Option<&DMatrix<f64>>,
        right: Option<&DMatrix<f64>>,
    ) -> Result<(MatrixNormal, DMatrix<f64>)> {
        if left.is_none() && right.is_none() {
            return Err(Error::InvalidParameter(
                "linear transform needs a left or right factor".into(),
            ));
        }
        let (n, p) = self.shape();
        let c = left.cloned().unwrap_or_else(|| DMatrix::identity(n, n));
        let d = right.cloned().unwrap_or_else(|| DMatrix::identity(p, p));
        if c.ncols() != n || d.nrows() != p {
            return Err(Error::Dimension(format!(
                "transform C {:?} · X {:?} · D {:?}",
                c.shape(),
                (n, p),
                d.shape()
            )));
        }
        let row = crate::linalg::symmetrize(&(&c * &self.row_cov * c.transpose()));
        let col = crate::linalg::symmetrize(&(d.transpose() * &self.col_cov * &d));
        let result = MatrixNormal {
            mean: &c * &self.mean * &d,
            row_cov: row,
            col_cov: col,
        };
        let cross = (d.transpose() * &self.col_cov).kronecker(&(&c * &self.row_cov));
        Ok((result, cross))
    }

    /// `count` draws `M + √A Z √Bᵀ` with i.i.d. standard normal `Z`, deterministic in `seed`.
    pub fn sample(&self, seed: u64, count: usize) -> Result<Vec<DMatrix<f64>>> {
        if count == 0 {
            return Err(Error::InvalidParameter("sample count must be at least 1".into()));
        }
        let la = psd_factor(&self.row_cov, "row covariance")?;
        let lb = psd_factor(&self.col_cov, "column covariance")?;
        let lbt = lb.transpose();
        let (n, p) = self.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..count)
            .map(|_| {
                let z = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
                &self.mean + &la * z * &lbt
            })
            .collect())
    }

    pub fn logpdf(&self, x: &DMatrix<f64>) -> Result<f64> {
        if x.shape() != self.shape() {
            return Err(Error::Dimension(format!(
                "logpdf at {:?} for distribution of shape {:?}",
                x.shape(),
                self.shape()
            )));
        }
        let (n, p) = self.shape();
        let ca = jittered_cholesky(&self.row_cov, "row covariance")?;
        let cb = jittered_cholesky(&self.col_cov, "column covariance")?;
        let e = x - &self.mean;
        // tr(B⁻¹ Eᵀ A⁻¹ E)
        let ainv_e = ca.solve(&e);
        let binv_et = cb.solve(&e.transpose());
        let quad = (binv_et * ainv_e).trace();
        let logdet_a = 2.0 * ca.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let logdet_b = 2.0 * cb.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let np = (n * p) as f64;
        Ok(-0.5 * quad
            - 0.5 * np * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * p as f64 * logdet_a
            - 0.5 * n as f64 * logdet_b)
    }
}
