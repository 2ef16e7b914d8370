//! Scalar state kernels with analytic first and mixed second derivatives.
//!
//! Only the squared-exponential (ARD) kernel is provided:
//!
//! ```text
//! κ(x, x') = σ² exp(-½ Σᵢ (xᵢ - x'ᵢ)² / ℓᵢ²)
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    SquaredExponential,
}

/// Which derivatives [`ScalarKernel::eval`] should return.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerivativeOrder {
    Value,
    Grad,
    Hessian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelEval {
    pub value: f64,
    /// ∇ₓ κ(x, x'), gradient in the first argument.
    pub grad_x: Option<DVector<f64>>,
    /// ∂²κ / ∂x ∂x'ᵀ, entry (i, j) = ∂²κ / ∂xᵢ ∂x'ⱼ.
    pub hessian_xx: Option<DMatrix<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarKernel {
    pub kind: KernelKind,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
}

impl ScalarKernel {
    pub fn squared_exponential(lengthscales: Vec<f64>, signal_variance: f64) -> Result<Self> {
        let k = Self {
            kind: KernelKind::SquaredExponential,
            lengthscales,
            signal_variance,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidParameter("kernel needs at least one lengthscale".into()));
        }
        if self.lengthscales.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lengthscales must be positive, got {:?}",
                self.lengthscales
            )));
        }
        if !(self.signal_variance > 0.0) || !self.signal_variance.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn check_dims(&self, x: &DVector<f64>, xp: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() || xp.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "kernel of dimension {} evaluated at points of dimension {} and {}",
                self.dim(),
                x.len(),
                xp.len()
            )));
        }
        Ok(())
    }

    pub fn eval(&self, x: &DVector<f64>, xp: &DVector<f64>, order: DerivativeOrder) -> Result<KernelEval> {
        self.validate()?;
        self.check_dims(x, xp)?;
        let value = self.value_unchecked(x, xp);
        let (grad_x, hessian_xx) = match order {
            DerivativeOrder::Value => (None, None),
            DerivativeOrder::Grad => (Some(self.grad_unchecked(x, xp, value)), None),
            DerivativeOrder::Hessian => (
                Some(self.grad_unchecked(x, xp, value)),
                Some(self.cross_hessian_unchecked(x, xp, value)),
            ),
        };
        Ok(KernelEval {
            value,
            grad_x,
            hessian_xx,
        })
    }

    pub fn value(&self, x: &DVector<f64>, xp: &DVector<f64>) -> f64 {
        self.value_unchecked(x, xp)
    }

    pub fn grad(&self, x: &DVector<f64>, xp: &DVector<f64>) -> DVector<f64> {
        let v = self.value_unchecked(x, xp);
        self.grad_unchecked(x, xp, v)
    }

    pub fn cross_hessian(&self, x: &DVector<f64>, xp: &DVector<f64>) -> DMatrix<f64> {
        let v = self.value_unchecked(x, xp);
        self.cross_hessian_unchecked(x, xp, v)
    }

    fn value_unchecked(&self, x: &DVector<f64>, xp: &DVector<f64>) -> f64 {
        let r2: f64 = self
            .lengthscales
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let d = (x[i] - xp[i]) / l;
                d * d
            })
            .sum();
        self.signal_variance * (-0.5 * r2).exp()
    }

    fn grad_unchecked(&self, x: &DVector<f64>, xp: &DVector<f64>, value: f64) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            let l2 = self.lengthscales[i] * self.lengthscales[i];
            -value * (x[i] - xp[i]) / l2
        })
    }

    fn cross_hessian_unchecked(&self, x: &DVector<f64>, xp: &DVector<f64>, value: f64) -> DMatrix<f64> {
        let n = self.dim();
        let scaled: Vec<f64> = (0..n)
            .map(|i| (x[i] - xp[i]) / (self.lengthscales[i] * self.lengthscales[i]))
            .collect();
        DMatrix::from_fn(n, n, |i, j| {
            let diag = if i == j {
                1.0 / (self.lengthscales[i] * self.lengthscales[i])
            } else {
                0.0
            };
            value * (diag - scaled[i] * scaled[j])
        })
    }

    /// Gram matrix with entry (i, j) = κ(xs[i], ys[j]).
    pub fn gram_matrix(&self, xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        if xs.is_empty() || ys.is_empty() {
            return Err(Error::Dimension("gram matrix of an empty point list".into()));
        }
        self.validate()?;
        for x in xs.iter().chain(ys.iter()) {
            if x.len() != self.dim() {
                return Err(Error::Dimension(format!(
                    "point of dimension {} for a kernel of dimension {}",
                    x.len(),
                    self.dim()
                )));
            }
        }
        Ok(DMatrix::from_fn(xs.len(), ys.len(), |i, j| {
            self.value_unchecked(&xs[i], &ys[j])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn unit(n: usize) -> ScalarKernel {
        ScalarKernel::squared_exponential(vec![1.0; n], 1.0).unwrap()
    }

    /// Direct scalar re-implementation used as an independent check.
    fn se_scalar(l: &[f64], s2: f64, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..l.len() {
            acc += ((x[i] - y[i]) / l[i]).powi(2);
        }
        s2 * (-acc / 2.0).exp()
    }

    #[test]
    fn coincident_points() {
        let k = ScalarKernel::squared_exponential(vec![0.3, 2.0], 4.5).unwrap();
        let x = dvector![0.7, -1.2];
        let e = k.eval(&x, &x, DerivativeOrder::Hessian).unwrap();
        assert_eq!(e.value, 4.5);
        assert_eq!(e.grad_x.unwrap().amax(), 0.0);
    }

    #[test]
    fn unit_hessian_is_identity_by_finite_differences() {
        let k = unit(3);
        let x = dvector![0.1, 0.2, -0.3];
        let h = 1e-5;
        let mut fd = DMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let mut xpp = x.clone();
                let mut xpm = x.clone();
                let mut xmp = x.clone();
                let mut xmm = x.clone();
                xpp[i] += h;
                xmp[i] -= h;
                xpm[i] += h;
                xmm[i] -= h;
                let mut ypp = x.clone();
                let mut ypm = x.clone();
                ypp[j] += h;
                ypm[j] -= h;
                fd[(i, j)] = (k.value(&xpp, &ypp) - k.value(&xpm, &ypm) - k.value(&xmp, &ypp)
                    + k.value(&xmm, &ypm))
                    / (4.0 * h * h);
            }
        }
        assert!((fd - DMatrix::identity(3, 3)).amax() < 1e-5);
        assert!((k.cross_hessian(&x, &x) - DMatrix::<f64>::identity(3, 3)).amax() < 1e-15);
    }

    #[test]
    fn known_value() {
        let k = unit(2);
        let v = k.value(&dvector![0.0, 0.0], &dvector![1.0, 0.0]);
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - se_scalar(&[1.0, 1.0], 1.0, &[0.0, 0.0], &[1.0, 0.0])).abs() < 1e-15);
    }

    #[test]
    fn gram_shapes_and_errors() {
        let k = ScalarKernel::squared_exponential(vec![0.5, 1.5], 2.0).unwrap();
        let x = vec![dvector![0.0, 1.0]];
        let g = k.gram_matrix(&x, &x).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert_eq!(g[(0, 0)], 2.0);

        let xs = vec![dvector![0.0, 1.0], dvector![0.3, -0.2]];
        let ys = vec![dvector![1.0, 1.0], dvector![0.0, 0.0], dvector![-2.0, 0.5]];
        let g = k.gram_matrix(&xs, &ys).unwrap();
        assert_eq!(g.shape(), (2, 3));
        for i in 0..2 {
            for j in 0..3 {
                let direct = se_scalar(&[0.5, 1.5], 2.0, xs[i].as_slice(), ys[j].as_slice());
                assert!((g[(i, j)] - direct).abs() < 1e-14);
            }
        }
        assert!(k.gram_matrix(&[], &ys).is_err());
    }

    #[test]
    fn rejects_bad_hyperparameters_and_dims() {
        assert!(ScalarKernel::squared_exponential(vec![1.0, 0.0], 1.0).is_err());
        assert!(ScalarKernel::squared_exponential(vec![1.0], -1.0).is_err());
        let k = unit(2);
        assert!(k.eval(&dvector![0.0], &dvector![0.0, 1.0], DerivativeOrder::Value).is_err());
    }

    #[test]
    fn gram_of_fifty_points_factorizes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let k = ScalarKernel::squared_exponential(vec![0.7, 1.3], 1.7).unwrap();
        let pts: Vec<_> = (0..50)
            .map(|_| dvector![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let mut g = k.gram_matrix(&pts, &pts).unwrap();
        assert!(min_eigenvalue(&g) >= -1e-10);
        for i in 0..50 {
            g[(i, i)] += 1e-10;
        }
        assert!(nalgebra::Cholesky::new(g).is_some());
    }

    proptest! {
        #[test]
        fn grad_matches_central_differences(
            x in proptest::collection::vec(-2.0f64..2.0, 2),
            y in proptest::collection::vec(-2.0f64..2.0, 2),
            l0 in 0.3f64..3.0, l1 in 0.3f64..3.0, s2 in 0.2f64..5.0,
        ) {
            let k = ScalarKernel::squared_exponential(vec![l0, l1], s2).unwrap();
            let x = DVector::from_vec(x);
            let y = DVector::from_vec(y);
            let g = k.grad(&x, &y);
            let h = 1e-5;
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (k.value(&xp, &y) - k.value(&xm, &y)) / (2.0 * h);
                prop_assert!((g[i] - fd).abs() <= 1e-5 * (1.0 + g.norm()));
            }
            prop_assert!((k.value(&x, &y) - k.value(&y, &x)).abs() < 1e-15);
            prop_assert!(k.value(&x, &y) > 0.0 && k.value(&x, &y) <= s2);
        }

        #[test]
        fn cross_hessian_matches_differences_of_grad(
            x in proptest::collection::vec(-2.0f64..2.0, 2),
            y in proptest::collection::vec(-2.0f64..2.0, 2),
            l0 in 0.3f64..3.0, l1 in 0.3f64..3.0,
        ) {
            let k = ScalarKernel::squared_exponential(vec![l0, l1], 1.3).unwrap();
            let x = DVector::from_vec(x);
            let y = DVector::from_vec(y);
            let hm = k.cross_hessian(&x, &y);
            let h = 1e-5;
            for j in 0..2 {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[j] += h;
                ym[j] -= h;
                let fd = (k.grad(&x, &yp) - k.grad(&x, &ym)) / (2.0 * h);
                for i in 0..2 {
                    prop_assert!((hm[(i, j)] - fd[i]).abs() <= 1e-4 * (1.0 + hm.amax()));
                }
            }
        }
    }
}
