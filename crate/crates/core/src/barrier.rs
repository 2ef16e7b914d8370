//! Barrier functions and the Gaussian moments of their control barrier condition.
//!
//! Degree 1: `CBC = ∇hᵀ F(x) u̲ + α h`, Gaussian with closed-form moments.
//!
//! Degree 2 (with `L_g h ≡ 0`): `CBC² = ∇L_f hᵀ F(x) u̲ + K₁ h + K₂ L_f h`, a bilinear form
//! in the jointly Gaussian vector `z = [∇L_f h; F u̲; L_f h]`. Its first two moments are exact.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Complex, DMatrix, DVector};

use crate::dyn_gp::{AugmentedControl, DynamicsPosterior, LocalPosterior};
use crate::error::{Error, Result};
use crate::linalg::symmetrize;

/// Pre-clamp variances between this and zero are rounding noise.
pub const VARIANCE_CLAMP: f64 = -1e-6;

pub type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// `h` with its analytic derivatives, relative degree and class-K gains.
///
/// `gains` holds `[α]` for degree 1 and `K_α` (length r) otherwise.
#[derive(Clone)]
pub struct BarrierFunction {
    pub name: String,
    dim: usize,
    h: ScalarFn,
    grad: VectorFn,
    hess: Option<MatrixFn>,
    relative_degree: usize,
    gains: Vec<f64>,
}

impl fmt::Debug for BarrierFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BarrierFunction")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("relative_degree", &self.relative_degree)
            .field("gains", &self.gains)
            .finish()
    }
}

impl BarrierFunction {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        h: ScalarFn,
        grad: VectorFn,
        hess: Option<MatrixFn>,
        relative_degree: usize,
        gains: Vec<f64>,
    ) -> Result<Self> {
        if relative_degree == 0 {
            return Err(Error::Barrier("relative degree must be at least 1".into()));
        }
        if gains.len() != relative_degree {
            return Err(Error::Barrier(format!(
                "{} gains for relative degree {relative_degree}",
                gains.len()
            )));
        }
        if gains.iter().any(|g| !g.is_finite()) {
            return Err(Error::Barrier("gains must be finite".into()));
        }
        if relative_degree == 1 && !(gains[0] > 0.0) {
            return Err(Error::Barrier(format!("alpha must be positive, got {}", gains[0])));
        }
        if relative_degree >= 2 && hess.is_none() {
            return Err(Error::Barrier("relative degree ≥ 2 needs a Hessian".into()));
        }
        Ok(Self {
            name: name.into(),
            dim,
            h,
            grad,
            hess,
            relative_degree,
            gains,
        })
    }

    /// `h(x) = aᵀx + b`.
    pub fn affine(a: DVector<f64>, b: f64, relative_degree: usize, gains: Vec<f64>) -> Result<Self> {
        let n = a.len();
        let a1 = a.clone();
        let a2 = a;
        Self::new(
            "affine",
            n,
            Arc::new(move |x| a1.dot(x) + b),
            Arc::new(move |_| a2.clone()),
            Some(Arc::new(move |_| DMatrix::zeros(n, n))),
            relative_degree,
            gains,
        )
    }

    pub fn with_gains(&self, gains: Vec<f64>) -> Result<Self> {
        Self::new(
            self.name.clone(),
            self.dim,
            self.h.clone(),
            self.grad.clone(),
            self.hess.clone(),
            gains.len(),
            gains,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn relative_degree(&self) -> usize {
        self.relative_degree
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn alpha(&self) -> f64 {
        self.gains[0]
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (self.h)(x)
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad)(x)
    }

    pub fn hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.hess
            .as_ref()
            .map(|h| h(x))
            .ok_or_else(|| Error::Barrier(format!("barrier {} has no Hessian", self.name)))
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "state of dimension {} for barrier on ℝ^{}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Compare analytic derivatives with central differences (step 1e-5).
    ///
    /// Returns the worst relative errors `(grad, hessian)` after checking them
    /// against `grad_tol` and `hess_tol`.
    pub fn verify_derivatives(
        &self,
        points: &[DVector<f64>],
        grad_tol: f64,
        hess_tol: f64,
    ) -> Result<(f64, f64)> {
        let step = 1e-5;
        let mut worst = (0.0_f64, 0.0_f64);
        for x in points {
            self.check_state(x)?;
            let g = self.grad(x);
            let hess = self.hess.as_ref().map(|h| h(x));
            for a in 0..self.dim {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[a] += step;
                xm[a] -= step;
                let fd = (self.value(&xp) - self.value(&xm)) / (2.0 * step);
                worst.0 = worst.0.max((fd - g[a]).abs() / (1.0 + g[a].abs()));
                if let Some(hm) = &hess {
                    let dg = (self.grad(&xp) - self.grad(&xm)) / (2.0 * step);
                    for b in 0..self.dim {
                        worst.1 = worst.1.max((dg[b] - hm[(a, b)]).abs() / (1.0 + hm[(a, b)].abs()));
                    }
                }
            }
        }
        if worst.0 > grad_tol || worst.1 > hess_tol {
            return Err(Error::Barrier(format!(
                "derivative self-check failed for {}: grad {:e}, hessian {:e}",
                self.name, worst.0, worst.1
            )));
        }
        Ok(worst)
    }

    /// Check `L_g h = ∇hᵀ g ≈ 0` (≤ 1e-10) on sample points using a known input matrix.
    pub fn verify_relative_degree_two(
        &self,
        input_matrix: impl Fn(&DVector<f64>) -> DMatrix<f64>,
        points: &[DVector<f64>],
    ) -> Result<f64> {
        let mut worst = 0.0_f64;
        for x in points {
            self.check_state(x)?;
            let lgh = self.grad(x).transpose() * input_matrix(x);
            worst = worst.max(lgh.amax());
        }
        if worst > 1e-10 {
            return Err(Error::Barrier(format!(
                "L_g h = {worst:e} is not zero; barrier {} is not relative degree 2",
                self.name
            )));
        }
        Ok(worst)
    }
}

/// Moments of the degree-2 Lie chain intermediate quantities.
#[derive(Clone, Debug)]
pub struct Cbc2Internals {
    pub lie: JointLieMoments,
    pub lf_mean: f64,
    pub lf_var: f64,
    /// E and Var of `∇L_f hᵀ F u̲`.
    pub inner_mean: f64,
    pub inner_var: f64,
    /// cov(∇L_f hᵀ F u̲, L_f h).
    pub inner_lf_cov: f64,
}

#[derive(Clone, Debug)]
pub struct CbcMoments {
    pub mean: f64,
    pub variance: f64,
    /// Variance before clamping at zero.
    pub raw_variance: f64,
    pub internals: Option<Cbc2Internals>,
}

/// Moments of `z = [∇L_f h; F(x) u̲; L_f h] ∈ ℝ^{2n+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLieMoments {
    pub z_mean: DVector<f64>,
    pub z_cov: DMatrix<f64>,
}

impl JointLieMoments {
    pub fn state_dim(&self) -> usize {
        (self.z_mean.len() - 1) / 2
    }

    pub fn grad_lf_mean(&self) -> DVector<f64> {
        let n = self.state_dim();
        self.z_mean.rows(0, n).into_owned()
    }

    pub fn xdot_mean(&self) -> DVector<f64> {
        let n = self.state_dim();
        self.z_mean.rows(n, n).into_owned()
    }

    pub fn lf_mean(&self) -> f64 {
        self.z_mean[2 * self.state_dim()]
    }

    /// Block `(i, j)` with blocks ordered `∇L_f h`, `F u̲`, `L_f h`.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let n = self.state_dim();
        let range = |b: usize| match b {
            0 => (0, n),
            1 => (n, n),
            _ => (2 * n, 1),
        };
        let (r0, nr) = range(i);
        let (c0, nc) = range(j);
        self.z_cov.view((r0, c0), (nr, nc)).into_owned()
    }
}

pub(crate) fn clamp_variance(v: f64, context: &str) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v >= VARIANCE_CLAMP {
        log::debug!("clamped variance {v:e} to zero in {context}");
        Ok(0.0)
    } else {
        Err(Error::NegativeVariance {
            value: v,
            context: context.to_string(),
        })
    }
}

fn check_inputs(loc: &LocalPosterior, bf: &BarrierFunction, u: &DVector<f64>) -> Result<DVector<f64>> {
    bf.check_state(&loc.x)?;
    let p = loc.cov.nrows();
    if u.len() + 1 != p {
        return Err(Error::Dimension(format!(
            "control of dimension {} for a model with {} inputs",
            u.len(),
            p - 1
        )));
    }
    Ok(AugmentedControl::new(u).into_inner())
}

/// Degree-1 moments from a precomputed local posterior.
pub fn cbc1_moments_local(loc: &LocalPosterior, bf: &BarrierFunction, u: &DVector<f64>) -> Result<CbcMoments> {
    if bf.relative_degree() != 1 {
        return Err(Error::Barrier(format!(
            "degree-1 moments requested for a degree-{} barrier",
            bf.relative_degree()
        )));
    }
    let ub = check_inputs(loc, bf, u)?;
    let x = &loc.x;
    let grad = bf.grad(x);
    let mean = grad.dot(&(&loc.mean * &ub)) + bf.alpha() * bf.value(x);
    let raw = ub.dot(&(&loc.cov * &ub)) * grad.dot(&(&loc.row_cov * &grad));
    Ok(CbcMoments {
        mean,
        variance: clamp_variance(raw, "degree-1 CBC")?,
        raw_variance: raw,
        internals: None,
    })
}

/// `E[CBC] = ∇hᵀ M_k u̲ + α h`, `Var[CBC] = u̲ᵀ B_k u̲ · ∇hᵀ A ∇h`.
pub fn cbc1_moments(
    post: &DynamicsPosterior,
    bf: &BarrierFunction,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<CbcMoments> {
    // Only values are needed, so skip the derivative cache.
    if bf.relative_degree() != 1 {
        return Err(Error::Barrier(format!(
            "degree-1 moments requested for a degree-{} barrier",
            bf.relative_degree()
        )));
    }
    bf.check_state(x)?;
    let pm = post.posterior_moments(x)?;
    let loc = LocalPosterior {
        x: x.clone(),
        row_cov: post.prior().row_cov.clone(),
        mean: pm.mean,
        mean_jacobian: Vec::new(),
        cov: pm.cov,
        cov_grad: Vec::new(),
        cov_cross_hessian: Vec::new(),
    };
    cbc1_moments_local(&loc, bf, u)
}

/// Joint moments of `z` from a precomputed local posterior.
pub fn lie_chain_moments_local(
    loc: &LocalPosterior,
    bf: &BarrierFunction,
    u: &DVector<f64>,
) -> Result<JointLieMoments> {
    let ub = check_inputs(loc, bf, u)?;
    let n = loc.state_dim();
    if loc.mean_jacobian.len() != n || loc.cov_grad.len() != n || loc.cov_cross_hessian.len() != n {
        return Err(Error::Dimension("local posterior lacks derivative information".into()));
    }
    let x = &loc.x;
    let a = &loc.row_cov;
    let grad_h = bf.grad(x);
    let hess_h = bf.hessian(x)?;

    let mu_f = loc.f_mean();
    let jac_f = loc.f_mean_jacobian();
    let kappa = loc.kappa_f();
    let dkappa = loc.kappa_f_grad();
    let hkappa = symmetrize(&loc.kappa_f_cross_hessian());
    // β(x, x') = B_k(x, x')[0, :] u̲ and its gradient in x.
    let beta = loc.cov.row(0).dot(&ub.transpose());
    let dbeta = DVector::from_fn(n, |i, _| loc.cov_grad[i].row(0).dot(&ub.transpose()));

    let a_grad = a * &grad_h;
    let s = grad_h.dot(&a_grad);
    let ha = &hess_h * a;
    let ha_grad = &hess_h * &a_grad;

    let mut z_mean = DVector::zeros(2 * n + 1);
    z_mean.rows_mut(0, n).copy_from(&(&hess_h * &mu_f + jac_f.transpose() * &grad_h));
    z_mean.rows_mut(n, n).copy_from(&(&loc.mean * &ub));
    z_mean[2 * n] = grad_h.dot(&mu_f);

    let k_grad = &ha * hess_h.transpose() * kappa
        + &ha_grad * dkappa.transpose()
        + &dkappa * ha_grad.transpose()
        + &hkappa * s;
    let c_grad_xdot = &ha * beta + &dbeta * a_grad.transpose();
    let c_grad_lf = &ha_grad * kappa + &dkappa * s;
    let var_xdot = a * ub.dot(&(&loc.cov * &ub));
    let c_xdot_lf = &a_grad * beta;
    let var_lf = kappa * s;

    let mut z_cov = DMatrix::zeros(2 * n + 1, 2 * n + 1);
    z_cov.view_mut((0, 0), (n, n)).copy_from(&k_grad);
    z_cov.view_mut((0, n), (n, n)).copy_from(&c_grad_xdot);
    z_cov.view_mut((n, 0), (n, n)).copy_from(&c_grad_xdot.transpose());
    z_cov.view_mut((0, 2 * n), (n, 1)).copy_from(&c_grad_lf);
    z_cov.view_mut((2 * n, 0), (1, n)).copy_from(&c_grad_lf.transpose());
    z_cov.view_mut((n, n), (n, n)).copy_from(&var_xdot);
    z_cov.view_mut((n, 2 * n), (n, 1)).copy_from(&c_xdot_lf);
    z_cov.view_mut((2 * n, n), (1, n)).copy_from(&c_xdot_lf.transpose());
    z_cov[(2 * n, 2 * n)] = var_lf;
    let z_cov = symmetrize(&z_cov);

    if let Some(d) = z_cov.diagonal().iter().find(|d| **d < -1e-8) {
        return Err(Error::NegativeVariance {
            value: *d,
            context: "Lie chain covariance diagonal".into(),
        });
    }
    Ok(JointLieMoments { z_mean, z_cov })
}

pub fn lie_chain_moments(
    post: &DynamicsPosterior,
    bf: &BarrierFunction,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<JointLieMoments> {
    bf.check_state(x)?;
    lie_chain_moments_local(&post.local(x)?, bf, u)
}

/// Moments of the bilinear form `xᵀy` for jointly Gaussian `x`, `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearMoments {
    pub mean: f64,
    pub variance: f64,
    pub raw_variance: f64,
    /// cov(x, xᵀy).
    pub cov_with_x: DVector<f64>,
    /// cov(y, xᵀy).
    pub cov_with_y: DVector<f64>,
}

/// `cov_xy[(i, j)] = cov(xᵢ, yⱼ)`.
pub fn quadratic_inner_moments(
    x_mean: &DVector<f64>,
    y_mean: &DVector<f64>,
    var_x: &DMatrix<f64>,
    var_y: &DMatrix<f64>,
    cov_xy: &DMatrix<f64>,
) -> Result<BilinearMoments> {
    let d = x_mean.len();
    if y_mean.len() != d
        || var_x.shape() != (d, d)
        || var_y.shape() != (d, d)
        || cov_xy.shape() != (d, d)
    {
        return Err(Error::Dimension(format!(
            "bilinear moments need conformable blocks of dimension {d}"
        )));
    }
    let mean = x_mean.dot(y_mean) + cov_xy.trace();
    let raw = (cov_xy * cov_xy).trace()
        + (var_x * var_y).trace()
        + y_mean.dot(&(var_x * y_mean))
        + x_mean.dot(&(var_y * x_mean))
        + 2.0 * y_mean.dot(&(cov_xy * x_mean));
    Ok(BilinearMoments {
        mean,
        variance: clamp_variance(raw, "bilinear form")?,
        raw_variance: raw,
        cov_with_x: var_x * y_mean + cov_xy * x_mean,
        cov_with_y: cov_xy.transpose() * x_mean + var_y * y_mean,
    })
}

/// Degree-2 moments from a precomputed local posterior.
pub fn cbc2_moments_local(loc: &LocalPosterior, bf: &BarrierFunction, u: &DVector<f64>) -> Result<CbcMoments> {
    if bf.relative_degree() != 2 || bf.gains().len() != 2 {
        return Err(Error::Barrier(format!(
            "degree-2 moments need a degree-2 barrier with K_alpha of length 2 (got degree {})",
            bf.relative_degree()
        )));
    }
    let lie = lie_chain_moments_local(loc, bf, u)?;
    let n = lie.state_dim();
    let (k1, k2) = (bf.gains()[0], bf.gains()[1]);

    let xm = lie.grad_lf_mean();
    let ym = lie.xdot_mean();
    let var_x = lie.block(0, 0);
    let var_y = lie.block(1, 1);
    let cov_xy = lie.block(0, 1);
    let inner = quadratic_inner_moments(&xm, &ym, &var_x, &var_y, &cov_xy)?;

    let lf_mean = lie.lf_mean();
    let lf_var = lie.z_cov[(2 * n, 2 * n)];
    let c_x_lf = lie.z_cov.view((0, 2 * n), (n, 1)).column(0).into_owned();
    let c_y_lf = lie.z_cov.view((n, 2 * n), (n, 1)).column(0).into_owned();
    // Third central moments of a Gaussian vanish, leaving the linear terms.
    let inner_lf_cov = ym.dot(&c_x_lf) + xm.dot(&c_y_lf);

    let h = bf.value(&loc.x);
    let mean = inner.mean + k1 * h + k2 * lf_mean;
    let raw = inner.raw_variance + k2 * k2 * lf_var + 2.0 * k2 * inner_lf_cov;
    Ok(CbcMoments {
        mean,
        variance: clamp_variance(raw, "degree-2 CBC")?,
        raw_variance: raw,
        internals: Some(Cbc2Internals {
            lie,
            lf_mean,
            lf_var,
            inner_mean: inner.mean,
            inner_var: inner.variance,
            inner_lf_cov,
        }),
    })
}

pub fn cbc2_moments(
    post: &DynamicsPosterior,
    bf: &BarrierFunction,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<CbcMoments> {
    bf.check_state(x)?;
    cbc2_moments_local(&post.local(x)?, bf, u)
}

/// Dispatch on the barrier's relative degree.
pub fn cbc_moments_local(loc: &LocalPosterior, bf: &BarrierFunction, u: &DVector<f64>) -> Result<CbcMoments> {
    match bf.relative_degree() {
        1 => cbc1_moments_local(loc, bf, u),
        2 => cbc2_moments_local(loc, bf, u),
        r => Err(Error::Barrier(format!("moments for relative degree {r} are not available"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KalphaCheck {
    pub ok: bool,
    pub poles: Vec<Complex<f64>>,
    /// All poles real and strictly negative.
    pub real_negative: bool,
    /// Some ordering of the poles keeps every `νᵢ(x₀) ≥ 0`.
    pub initial_condition_ok: bool,
    /// The pole ordering `(p₁, …, p_r)` that satisfied the initial-condition test.
    pub ordering: Option<Vec<f64>>,
}

/// Companion matrix `𝓕 − 𝓖K_α` of the integrator chain with state feedback.
pub fn transverse_matrix(k_alpha: &[f64]) -> DMatrix<f64> {
    let r = k_alpha.len();
    let mut m = DMatrix::zeros(r, r);
    for i in 0..r.saturating_sub(1) {
        m[(i, i + 1)] = 1.0;
    }
    for (j, k) in k_alpha.iter().enumerate() {
        m[(r - 1, j)] = -k;
    }
    m
}

fn permutations(items: &[f64]) -> Vec<Vec<f64>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Check the design conditions on `K_α` for an exponential CBF.
///
/// `eta0 = [h, L_f h, …, L_f^{r−1} h]` at the initial state. With poles `λᵢ = −pᵢ`,
/// `ν₀ = h` and `νᵢ = ν̇ᵢ₋₁ + pᵢ νᵢ₋₁`, every `νᵢ(x₀)` for `i < r` must be nonnegative.
pub fn validate_kalpha(k_alpha: &[f64], eta0: &[f64]) -> Result<KalphaCheck> {
    let r = k_alpha.len();
    if r == 0 {
        return Err(Error::Barrier("K_alpha must have at least one entry".into()));
    }
    if eta0.len() != r {
        return Err(Error::Dimension(format!(
            "eta0 has {} entries for K_alpha of length {r}",
            eta0.len()
        )));
    }
    if r > 8 {
        return Err(Error::InvalidParameter("K_alpha validation supports r ≤ 8".into()));
    }
    let poles: Vec<Complex<f64>> = transverse_matrix(k_alpha).complex_eigenvalues().iter().cloned().collect();
    // Repeated real poles come back with O(√ε) imaginary noise from the Schur form.
    let real_negative = poles
        .iter()
        .all(|p| p.im.abs() <= 1e-6 * (1.0 + p.re.abs()) && p.re < 0.0);

    let mut ordering = None;
    if real_negative {
        let rates: Vec<f64> = poles.iter().map(|p| -p.re).collect();
        for perm in permutations(&rates) {
            // ν_i as polynomial coefficients c with ν_i = Σ_j c_j η_j.
            let mut coeffs = vec![1.0];
            let mut good = true;
            for p in perm.iter().take(r - 1) {
                let mut next = vec![0.0; coeffs.len() + 1];
                for (j, c) in coeffs.iter().enumerate() {
                    next[j + 1] += c;
                    next[j] += p * c;
                }
                coeffs = next;
                let nu: f64 = coeffs.iter().zip(eta0).map(|(c, e)| c * e).sum();
                if nu < 0.0 {
                    good = false;
                    break;
                }
            }
            if good {
                ordering = Some(perm);
                break;
            }
        }
    }
    let initial_condition_ok = ordering.is_some();
    Ok(KalphaCheck {
        ok: real_negative && initial_condition_ok,
        poles,
        real_negative,
        initial_condition_ok,
        ordering,
    })
}


#[cfg(test)]
mod monte_carlo {
    use super::*;
    use crate::dyn_gp::{fit_posterior, Dataset, DynamicsPrior};
    use crate::kernels::ScalarKernel;
    use crate::oracles::{sample_cbc, sample_lie_chain, SampleStats};
    use nalgebra::dvector;

    #[test]
    fn degree_two_moments_match_sampling() {
        let prior = DynamicsPrior::new(
            DMatrix::from_row_slice(2, 2, &[0.6, 0.1, 0.1, 0.5]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.7]),
            ScalarKernel::squared_exponential(vec![0.8, 1.1], 1.0).unwrap(),
        )
        .unwrap();
        let data = Dataset::new(
            vec![dvector![0.0, 0.2], dvector![0.5, -0.1], dvector![-0.4, 0.3]],
            vec![dvector![1.0], dvector![-1.0], dvector![0.5]],
            vec![dvector![0.2, -0.6], dvector![0.1, 0.9], dvector![-0.3, 0.2]],
            vec![0.0, 1.0, 2.0],
        )
        .unwrap();
        let post = fit_posterior(prior, data, 1e-2).unwrap();
        let bf = BarrierFunction::new(
            "wave",
            2,
            Arc::new(|x| x[0].cos() * x[1] + 0.3 * x[1] * x[1]),
            Arc::new(|x| dvector![-x[0].sin() * x[1], x[0].cos() + 0.6 * x[1]]),
            Some(Arc::new(|x| {
                DMatrix::from_row_slice(2, 2, &[-x[0].cos() * x[1], -x[0].sin(), -x[0].sin(), 0.6])
            })),
            2,
            vec![1.0, 1.5],
        )
        .unwrap();
        let x = dvector![0.2, 0.4];
        let u = dvector![0.8];
        let lie = lie_chain_moments(&post, &bf, &x, &u).unwrap();
        let (zm, zc) = sample_lie_chain(&post, &bf, &x, &u, 100_000, 11).unwrap();
        let se = (lie.z_cov.diagonal() / 100_000.0).map(f64::sqrt);
        for i in 0..5 {
            assert!((zm[i] - lie.z_mean[i]).abs() <= 4.0 * se[i] + 1e-9, "mean {i}: {} vs {}", zm[i], lie.z_mean[i]);
        }
        let scale = lie.z_cov.diagonal().map(f64::sqrt);
        for i in 0..5 {
            for j in 0..5 {
                let tol = 0.03 * scale[i] * scale[j] + 1e-9;
                assert!((zc[(i, j)] - lie.z_cov[(i, j)]).abs() <= tol, "cov ({i},{j}): {} vs {}", zc[(i, j)], lie.z_cov[(i, j)]);
            }
        }
        let m = cbc2_moments(&post, &bf, &x, &u).unwrap();
        let s = SampleStats::from_samples(&sample_cbc(&post, &bf, &x, &u, 100_000, 12).unwrap());
        assert!(s.mean_z(m.mean) < 3.0, "{} vs {}", s.mean, m.mean);
        assert!((s.variance / m.variance - 1.0).abs() < 0.05, "{} vs {}", s.variance, m.variance);
    }
}
