//! Matrix-variate Gaussian-process regression of control-affine dynamics.
//!
//! The unknown dynamics are `ẋ = F(x) u̲` with `F(x) = [f(x) g(x)] ∈ ℝ^{n×(1+m)}`
//! and `u̲ = [1; u]`. The prior is
//!
//! ```text
//! vec(F(x)) ~ GP(vec(M₀(x)), κ(x, x') B ⊗ A)
//! ```
//!
//! and observations `ẋᵢ = F(xᵢ) u̲ᵢ` keep the posterior in the same separable
//! family, `vec(F(x)) | data ~ GP(vec(M_k(x)), B_k(x, x') ⊗ A)`, with
//!
//! ```text
//! G        = U̲ᵀ (𝕶 ⊗ B) U̲ + σ_j I                       (k × k)
//! W(x)     = U̲ᵀ (𝒌(x) ⊗ B)                              (k × (1+m))
//! M_k(x)   = M₀(x) + (Ẋ − ℳ U̲) G⁻¹ W(x)
//! B_k(x,x') = κ(x,x') B − W(x)ᵀ G⁻¹ W(x')
//! ```
//!
//! Only the `k × k` matrix `G` is ever factorized.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::ScalarKernel;
use crate::linalg::{is_symmetric, jittered_cholesky, min_eigenvalue, symmetrize};
use crate::mvg::GaussianVec;

/// User-supplied prior mean `M₀(x)` with its Jacobian.
pub trait MeanFunction: Send + Sync {
    fn value(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// `∂M₀/∂xₐ` for each state coordinate `a`.
    fn jacobian(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>>;
}

#[derive(Clone)]
pub enum PriorMean {
    Zero,
    Constant(DMatrix<f64>),
    Custom(Arc<dyn MeanFunction>),
}

impl fmt::Debug for PriorMean {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorMean::Zero => write!(f, "Zero"),
            PriorMean::Constant(m) => write!(f, "Constant({m:?})"),
            PriorMean::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl PriorMean {
    fn value(&self, x: &DVector<f64>, n: usize, p: usize) -> DMatrix<f64> {
        match self {
            PriorMean::Zero => DMatrix::zeros(n, p),
            PriorMean::Constant(m) => m.clone(),
            PriorMean::Custom(func) => func.value(x),
        }
    }

    fn jacobian(&self, x: &DVector<f64>, n: usize, p: usize) -> Vec<DMatrix<f64>> {
        match self {
            PriorMean::Custom(func) => func.jacobian(x),
            _ => vec![DMatrix::zeros(n, p); n],
        }
    }
}

/// `[1; u]`, the control augmented with the drift selector.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedControl(DVector<f64>);

impl AugmentedControl {
    pub fn new(u: &DVector<f64>) -> Self {
        let mut v = DVector::zeros(u.len() + 1);
        v[0] = 1.0;
        v.rows_mut(1, u.len()).copy_from(u);
        Self(v)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct DynamicsPrior {
    pub mean: PriorMean,
    /// `A`, covariance between state dimensions (n × n).
    pub row_cov: DMatrix<f64>,
    /// `B`, covariance between the columns of `F` ((1+m) × (1+m)).
    pub ctrl_cov: DMatrix<f64>,
    pub kernel: ScalarKernel,
}

impl DynamicsPrior {
    pub fn new(row_cov: DMatrix<f64>, ctrl_cov: DMatrix<f64>, kernel: ScalarKernel) -> Result<Self> {
        let prior = Self {
            mean: PriorMean::Zero,
            row_cov,
            ctrl_cov,
            kernel,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn with_mean(mut self, mean: PriorMean) -> Result<Self> {
        self.mean = mean;
        self.validate()?;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.row_cov.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.ctrl_cov.nrows().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.row_cov.nrows();
        if !self.row_cov.is_square() || !self.ctrl_cov.is_square() || self.ctrl_cov.nrows() < 2 {
            return Err(Error::Dimension("prior covariances must be square with 1+m ≥ 2".into()));
        }
        for (m, what) in [(&self.row_cov, "A"), (&self.ctrl_cov, "B")] {
            if !is_symmetric(m, 1e-12) {
                return Err(Error::InvalidParameter(format!("prior {what} is not symmetric")));
            }
            if min_eigenvalue(m) < -1e-10 * (1.0 + m.amax()) {
                return Err(Error::NotPositiveDefinite(format!("prior {what}")));
            }
        }
        self.kernel.validate()?;
        if self.kernel.dim() != n {
            return Err(Error::Dimension(format!(
                "kernel dimension {} does not match state dimension {n}",
                self.kernel.dim()
            )));
        }
        if let PriorMean::Constant(c) = &self.mean {
            if c.shape() != (n, self.ctrl_cov.nrows()) {
                return Err(Error::Dimension("constant prior mean has the wrong shape".into()));
            }
        }
        Ok(())
    }

    pub fn mean_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.mean.value(x, self.state_dim(), self.ctrl_cov.nrows())
    }
}

/// Training triples `(xᵢ, uᵢ, ẋᵢ)` with their timestamps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub derivs: Vec<DVector<f64>>,
    pub times: Vec<f64>,
}

impl Dataset {
    pub fn new(
        states: Vec<DVector<f64>>,
        controls: Vec<DVector<f64>>,
        derivs: Vec<DVector<f64>>,
        times: Vec<f64>,
    ) -> Result<Self> {
        let d = Self {
            states,
            controls,
            derivs,
            times,
        };
        d.validate()?;
        Ok(d)
    }

    /// Build training data from a sampled trajectory using forward differences.
    ///
    /// The final state has no derivative and is dropped, so the result has
    /// `states.len() - 1` entries; `controls[i]` is the input held on `[tᵢ, tᵢ₊₁)`.
    pub fn from_trajectory(
        states: &[DVector<f64>],
        controls: &[DVector<f64>],
        times: &[f64],
    ) -> Result<Self> {
        let derivs = approx_state_derivatives(states, times)?;
        let k = derivs.len();
        if controls.len() < k {
            return Err(Error::Dimension(format!(
                "{} controls for {k} derivative samples",
                controls.len()
            )));
        }
        Self::new(
            states[..k].to_vec(),
            controls[..k].to_vec(),
            derivs,
            times[..k].to_vec(),
        )
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn push(&mut self, x: DVector<f64>, u: DVector<f64>, xdot: DVector<f64>, t: f64) -> Result<()> {
        if let Some(&last) = self.times.last() {
            if !(t > last) {
                return Err(Error::InvalidParameter(format!(
                    "dataset times must increase strictly ({t} after {last})"
                )));
            }
        }
        self.states.push(x);
        self.controls.push(u);
        self.derivs.push(xdot);
        self.times.push(t);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.states.len();
        if self.controls.len() != k || self.derivs.len() != k || self.times.len() != k {
            return Err(Error::Dimension(format!(
                "dataset lengths differ: {} states, {} controls, {} derivatives, {} times",
                k,
                self.controls.len(),
                self.derivs.len(),
                self.times.len()
            )));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("dataset times must increase strictly".into()));
        }
        Ok(())
    }
}

/// Forward differences `(x[i+1] − x[i]) / (t[i+1] − t[i])`, one fewer than the inputs.
pub fn approx_state_derivatives(states: &[DVector<f64>], times: &[f64]) -> Result<Vec<DVector<f64>>> {
    if states.len() != times.len() {
        return Err(Error::Dimension(format!(
            "{} states with {} timestamps",
            states.len(),
            times.len()
        )));
    }
    if states.len() < 2 {
        return Err(Error::InvalidParameter("need at least two samples to difference".into()));
    }
    states
        .windows(2)
        .zip(times.windows(2))
        .map(|(x, t)| {
            let dt = t[1] - t[0];
            if !(dt > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "timestamps must increase strictly ({} then {})",
                    t[0], t[1]
                )));
            }
            Ok((&x[1] - &x[0]) / dt)
        })
        .collect()
}

/// Component view of the posterior at a single state.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMoments {
    /// `M_k(x)`, n × (1+m).
    pub mean: DMatrix<f64>,
    /// `B_k(x, x)`, (1+m) × (1+m).
    pub cov: DMatrix<f64>,
    pub f_mean: DVector<f64>,
    pub g_mean: DMatrix<f64>,
    /// `κ_f(x, x) = B_k(x, x)[0, 0]`.
    pub kappa_f: f64,
    /// First row of `B_k(x, x)`.
    pub b_row: DVector<f64>,
}

/// Posterior quantities at `x` together with their derivatives in the first
/// argument, all evaluated at `x' = x`.
#[derive(Clone, Debug)]
pub struct LocalPosterior {
    pub x: DVector<f64>,
    pub row_cov: DMatrix<f64>,
    pub mean: DMatrix<f64>,
    /// `∂M_k/∂xₐ`.
    pub mean_jacobian: Vec<DMatrix<f64>>,
    /// `B_k(x, x)`.
    pub cov: DMatrix<f64>,
    /// `∂/∂xₐ B_k(x, x')` at `x' = x`.
    pub cov_grad: Vec<DMatrix<f64>>,
    /// `∂²/∂xₐ∂x'_b B_k(x, x')` at `x' = x`, indexed `[a][b]`.
    pub cov_cross_hessian: Vec<Vec<DMatrix<f64>>>,
}

impl LocalPosterior {
    pub fn state_dim(&self) -> usize {
        self.x.len()
    }

    pub fn f_mean(&self) -> DVector<f64> {
        self.mean.column(0).into_owned()
    }

    /// Jacobian of the drift mean, entry (i, a) = ∂μ_{f,i}/∂xₐ.
    pub fn f_mean_jacobian(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        DMatrix::from_fn(n, n, |i, a| self.mean_jacobian[a][(i, 0)])
    }

    pub fn kappa_f(&self) -> f64 {
        self.cov[(0, 0)]
    }

    /// `∇ₓ κ_f(x, x')` at `x' = x`.
    pub fn kappa_f_grad(&self) -> DVector<f64> {
        DVector::from_fn(self.state_dim(), |a, _| self.cov_grad[a][(0, 0)])
    }

    /// `H_{x,x'} κ_f(x, x')` at `x' = x`.
    pub fn kappa_f_cross_hessian(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        DMatrix::from_fn(n, n, |a, b| self.cov_cross_hessian[a][b][(0, 0)])
    }
}

#[derive(Clone, Debug)]
pub struct DynamicsPosterior {
    prior: DynamicsPrior,
    data: Dataset,
    jitter: f64,
    ubar: Vec<DVector<f64>>,
    gram_chol: Option<Cholesky<f64, Dyn>>,
    residual: DMatrix<f64>,
    /// `(Ẋ − ℳU̲) G⁻¹`, n × k.
    weights: DMatrix<f64>,
}

impl DynamicsPosterior {
    pub fn prior(&self) -> &DynamicsPrior {
        &self.prior
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the only factorized matrix (the `k × k` Gram).
    pub fn gram_dim(&self) -> usize {
        self.gram_chol.as_ref().map_or(0, |c| c.l().nrows())
    }

    pub fn residual(&self) -> &DMatrix<f64> {
        &self.residual
    }

    pub fn state_dim(&self) -> usize {
        self.prior.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.prior.control_dim()
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::Dimension(format!(
                "state of dimension {} for a model of dimension {}",
                x.len(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    /// `W(x)`: row i is `κ(xᵢ, x) u̲ᵢᵀ B`.
    fn cross_weights(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let p = self.prior.ctrl_cov.nrows();
        let mut w = DMatrix::zeros(self.len(), p);
        for (i, (xi, ui)) in self.data.states.iter().zip(&self.ubar).enumerate() {
            let k = self.prior.kernel.value(x, xi);
            let row = (ui.transpose() * &self.prior.ctrl_cov) * k;
            w.row_mut(i).copy_from(&row);
        }
        w
    }

    /// `∂W(x)/∂xₐ` for every coordinate `a`.
    fn cross_weights_grad(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let n = self.state_dim();
        let p = self.prior.ctrl_cov.nrows();
        let mut out = vec![DMatrix::zeros(self.len(), p); n];
        for (i, (xi, ui)) in self.data.states.iter().zip(&self.ubar).enumerate() {
            let grad = self.prior.kernel.grad(x, xi);
            let ub = ui.transpose() * &self.prior.ctrl_cov;
            for (a, da) in out.iter_mut().enumerate() {
                da.row_mut(i).copy_from(&(&ub * grad[a]));
            }
        }
        out
    }

    pub fn mean(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        let mut m = self.prior.mean_at(x);
        if !self.is_empty() {
            m += &self.weights * self.cross_weights(x);
        }
        Ok(m)
    }

    /// `B_k(x, x')`.
    pub fn cross_cov_b(&self, x: &DVector<f64>, xp: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        self.check_state(xp)?;
        let mut b = &self.prior.ctrl_cov * self.prior.kernel.value(x, xp);
        if let Some(chol) = &self.gram_chol {
            let wx = self.cross_weights(x);
            let wxp = self.cross_weights(xp);
            b -= wx.transpose() * chol.solve(&wxp);
        }
        Ok(b)
    }

    pub fn posterior_moments(&self, x: &DVector<f64>) -> Result<PosteriorMoments> {
        let mean = self.mean(x)?;
        let cov = symmetrize(&self.cross_cov_b(x, x)?);
        let m = self.control_dim();
        Ok(PosteriorMoments {
            f_mean: mean.column(0).into_owned(),
            g_mean: mean.columns(1, m).into_owned(),
            kappa_f: cov[(0, 0)],
            b_row: cov.row(0).transpose(),
            mean,
            cov,
        })
    }

    /// `u̲ᵀ B_k(x, x) u̲` before clamping.
    pub fn raw_control_variance(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        self.check_control(u)?;
        let ub = AugmentedControl::new(u).into_inner();
        let b = self.cross_cov_b(x, x)?;
        Ok(ub.dot(&(&b * &ub)))
    }

    fn check_control(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.control_dim() {
            return Err(Error::Dimension(format!(
                "control of dimension {} for a model with {} inputs",
                u.len(),
                self.control_dim()
            )));
        }
        Ok(())
    }

    /// Distribution of `ẋ = F(x) u̲`: mean `M_k(x) u̲`, covariance `(u̲ᵀ B_k u̲) A`.
    pub fn predict_xdot(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<GaussianVec> {
        self.check_control(u)?;
        let ub = AugmentedControl::new(u).into_inner();
        let mean = self.mean(x)? * &ub;
        let s = self.raw_control_variance(x, u)?.max(0.0);
        Ok(GaussianVec {
            mean,
            cov: &self.prior.row_cov * s,
        })
    }

    /// Posterior values and first-argument derivatives at `x`.
    pub fn local(&self, x: &DVector<f64>) -> Result<LocalPosterior> {
        self.check_state(x)?;
        let n = self.state_dim();
        let p = self.prior.ctrl_cov.nrows();
        let b0 = &self.prior.ctrl_cov;
        let kern = &self.prior.kernel;
        let kxx = kern.value(x, x);
        let kgrad = kern.grad(x, x);
        let khess = kern.cross_hessian(x, x);

        let mut mean = self.prior.mean_at(x);
        let mut mean_jacobian = self.prior.mean.jacobian(x, n, p);
        let mut cov = b0 * kxx;
        let mut cov_grad: Vec<DMatrix<f64>> = (0..n).map(|a| b0 * kgrad[a]).collect();
        let mut cov_cross_hessian: Vec<Vec<DMatrix<f64>>> = (0..n)
            .map(|a| (0..n).map(|b| b0 * khess[(a, b)]).collect())
            .collect();

        if let Some(chol) = &self.gram_chol {
            let w = self.cross_weights(x);
            let dw = self.cross_weights_grad(x);
            let ginv_w = chol.solve(&w);
            let ginv_dw: Vec<DMatrix<f64>> = dw.iter().map(|d| chol.solve(d)).collect();
            mean += &self.weights * &w;
            for a in 0..n {
                mean_jacobian[a] += &self.weights * &dw[a];
                cov_grad[a] -= dw[a].transpose() * &ginv_w;
                for b in 0..n {
                    cov_cross_hessian[a][b] -= dw[a].transpose() * &ginv_dw[b];
                }
            }
            cov -= w.transpose() * ginv_w;
        }
        debug_assert!(mean_jacobian.len() == n);
        if mean_jacobian.iter().any(|j| j.shape() != (n, p)) {
            return Err(Error::Dimension("prior mean jacobian has the wrong shape".into()));
        }

        Ok(LocalPosterior {
            x: x.clone(),
            row_cov: self.prior.row_cov.clone(),
            mean,
            mean_jacobian,
            cov: symmetrize(&cov),
            cov_grad,
            cov_cross_hessian,
        })
    }

    /// Serializable snapshot (hyperparameters and data, no factorizations).
    pub fn snapshot(&self) -> Result<PosteriorSnapshot> {
        PosteriorSnapshot::from_posterior(self)
    }
}

/// Condition the prior on the dataset.
pub fn fit_posterior(prior: DynamicsPrior, data: Dataset, jitter: f64) -> Result<DynamicsPosterior> {
    prior.validate()?;
    data.validate()?;
    if !(jitter >= 0.0) || !jitter.is_finite() {
        return Err(Error::InvalidParameter(format!("jitter must be ≥ 0, got {jitter}")));
    }
    let n = prior.state_dim();
    let m = prior.control_dim();
    for ((x, u), xd) in data.states.iter().zip(&data.controls).zip(&data.derivs) {
        if x.len() != n || xd.len() != n || u.len() != m {
            return Err(Error::Dimension(format!(
                "training sample dims (x {}, u {}, ẋ {}) for a model with n = {n}, m = {m}",
                x.len(),
                u.len(),
                xd.len()
            )));
        }
    }
    let k = data.len();
    let ubar: Vec<DVector<f64>> = data
        .controls
        .iter()
        .map(|u| AugmentedControl::new(u).into_inner())
        .collect();

    if k == 0 {
        return Ok(DynamicsPosterior {
            prior,
            data,
            jitter,
            ubar,
            gram_chol: None,
            residual: DMatrix::zeros(n, 0),
            weights: DMatrix::zeros(n, 0),
        });
    }

    let bu: Vec<DVector<f64>> = ubar.iter().map(|u| &prior.ctrl_cov * u).collect();
    let mut gram = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let v = prior.kernel.value(&data.states[i], &data.states[j]) * ubar[i].dot(&bu[j]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
        gram[(i, i)] += jitter;
    }
    let chol = jittered_cholesky(&gram, "dynamics gram matrix")?;

    let mut residual = DMatrix::zeros(n, k);
    for i in 0..k {
        let pred = prior.mean_at(&data.states[i]) * &ubar[i];
        residual.set_column(i, &(&data.derivs[i] - pred));
    }
    // (R G⁻¹) = (G⁻¹ Rᵀ)ᵀ since G is symmetric.
    let weights = chol.solve(&residual.transpose()).transpose();

    Ok(DynamicsPosterior {
        prior,
        data,
        jitter,
        ubar,
        gram_chol: Some(chol),
        residual,
        weights,
    })
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Dimension(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorMeanSnapshot {
    Zero,
    Constant { value: Vec<Vec<f64>> },
}

/// JSON form of a trained posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorSnapshot {
    pub kernel: ScalarKernel,
    pub row_cov: Vec<Vec<f64>>,
    pub ctrl_cov: Vec<Vec<f64>>,
    pub prior_mean: PriorMeanSnapshot,
    pub jitter: f64,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub derivs: Vec<Vec<f64>>,
    pub times: Vec<f64>,
}

impl PosteriorSnapshot {
    pub fn from_posterior(post: &DynamicsPosterior) -> Result<Self> {
        let prior_mean = match &post.prior.mean {
            PriorMean::Zero => PriorMeanSnapshot::Zero,
            PriorMean::Constant(c) => PriorMeanSnapshot::Constant { value: rows_of(c) },
            PriorMean::Custom(_) => {
                return Err(Error::InvalidParameter(
                    "a custom prior mean cannot be serialized".into(),
                ))
            }
        };
        let vecs = |v: &[DVector<f64>]| v.iter().map(|x| x.iter().cloned().collect()).collect();
        Ok(Self {
            kernel: post.prior.kernel.clone(),
            row_cov: rows_of(&post.prior.row_cov),
            ctrl_cov: rows_of(&post.prior.ctrl_cov),
            prior_mean,
            jitter: post.jitter,
            states: vecs(&post.data.states),
            controls: vecs(&post.data.controls),
            derivs: vecs(&post.data.derivs),
            times: post.data.times.clone(),
        })
    }

    /// Refit the posterior described by this snapshot.
    pub fn restore(&self) -> Result<DynamicsPosterior> {
        let mean = match &self.prior_mean {
            PriorMeanSnapshot::Zero => PriorMean::Zero,
            PriorMeanSnapshot::Constant { value } => PriorMean::Constant(from_rows(value, "prior mean")?),
        };
        let prior = DynamicsPrior::new(
            from_rows(&self.row_cov, "row_cov")?,
            from_rows(&self.ctrl_cov, "ctrl_cov")?,
            self.kernel.clone(),
        )?
        .with_mean(mean)?;
        let vecs = |v: &[Vec<f64>]| v.iter().map(|x| DVector::from_vec(x.clone())).collect();
        let data = Dataset::new(vecs(&self.states), vecs(&self.controls), vecs(&self.derivs), self.times.clone())?;
        fit_posterior(prior, data, self.jitter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prior() -> DynamicsPrior {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        DynamicsPrior::new(a, b, ScalarKernel::squared_exponential(vec![0.8, 1.2], 1.5).unwrap()).unwrap()
    }

    fn random_data(k: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Dataset::default();
        for i in 0..k {
            d.push(
                dvector![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                dvector![rng.random_range(-2.0..2.0)],
                dvector![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                i as f64,
            )
            .unwrap();
        }
        d
    }

    #[test]
    fn augmented_control_leads_with_one() {
        let a = AugmentedControl::new(&dvector![3.0, -1.0]);
        assert_eq!(a.as_vector().as_slice(), &[1.0, 3.0, -1.0]);
    }

    #[test]
    fn finite_differences() {
        let xs = vec![dvector![1.0, 2.0]; 4];
        let t = vec![0.0, 0.1, 0.2, 0.3];
        let d = approx_state_derivatives(&xs, &t).unwrap();
        assert_eq!(d.len(), 3);
        assert!(d.iter().all(|v| v.amax() == 0.0));

        let tau = 0.01;
        let xs: Vec<_> = (0..5).map(|i| dvector![i as f64 * tau, 0.0]).collect();
        let t: Vec<_> = (0..5).map(|i| i as f64 * tau).collect();
        for v in approx_state_derivatives(&xs, &t).unwrap() {
            assert!((v[0] - 1.0).abs() < 1e-12 && v[1] == 0.0);
        }
        assert!(approx_state_derivatives(&xs[..2], &[0.0, 0.0]).is_err());
        assert!(approx_state_derivatives(&xs[..1], &[0.0]).is_err());
    }

    #[test]
    fn dataset_rejects_inconsistent_input() {
        let mut d = random_data(2, 0);
        assert!(d.push(dvector![0.0, 0.0], dvector![0.0], dvector![0.0, 0.0], 0.5).is_err());
        d.controls.pop();
        assert!(d.validate().is_err());
    }

    #[test]
    fn empty_dataset_is_the_prior() {
        let p = prior();
        let post = fit_posterior(p.clone(), Dataset::default(), 1e-6).unwrap();
        let x = dvector![0.3, -0.4];
        let xp = dvector![-0.1, 0.2];
        assert_eq!(post.mean(&x).unwrap(), DMatrix::zeros(2, 2));
        let expect = &p.ctrl_cov * p.kernel.value(&x, &xp);
        assert!((post.cross_cov_b(&x, &xp).unwrap() - expect).amax() < 1e-15);
        let pm = post.posterior_moments(&x).unwrap();
        assert_eq!(pm.f_mean, DVector::zeros(2));
        assert!((pm.kappa_f - p.ctrl_cov[(0, 0)] * 1.5).abs() < 1e-15);
        assert_eq!(post.gram_dim(), 0);
    }

    #[test]
    fn selectors_and_symmetry() {
        let post = fit_posterior(prior(), random_data(5, 1), 1e-6).unwrap();
        let x = dvector![0.1, 0.2];
        let xp = dvector![0.5, -0.3];
        let pm = post.posterior_moments(&x).unwrap();
        assert_eq!(pm.f_mean, pm.mean.column(0).into_owned());
        assert_eq!(pm.g_mean, pm.mean.columns(1, 1).into_owned());
        assert_eq!(pm.b_row, pm.cov.row(0).transpose());
        let bxy = post.cross_cov_b(&x, &xp).unwrap();
        let byx = post.cross_cov_b(&xp, &x).unwrap();
        assert!((bxy - byx.transpose()).amax() < 1e-12);
        assert!((post.cross_cov_b(&x, &x).unwrap() - &pm.cov).amax() < 1e-12);
        assert_eq!(post.gram_dim(), 5);
    }

    #[test]
    fn interpolates_noiseless_training_data() {
        let data = random_data(4, 2);
        let post = fit_posterior(prior(), data.clone(), 1e-12).unwrap();
        for i in 0..4 {
            let pred = post.predict_xdot(&data.states[i], &data.controls[i]).unwrap();
            assert!((&pred.mean - &data.derivs[i]).amax() < 1e-6);
            assert!(pred.cov.amax() < 1e-6);
        }
    }

    #[test]
    fn zero_row_cov_and_zero_control() {
        let mut p = prior();
        p.row_cov = DMatrix::zeros(2, 2);
        let post = fit_posterior(p, random_data(3, 3), 1e-6).unwrap();
        let x = dvector![0.0, 0.1];
        let pred = post.predict_xdot(&x, &dvector![4.0]).unwrap();
        assert_eq!(pred.cov.amax(), 0.0);
        let pred0 = post.predict_xdot(&x, &dvector![0.0]).unwrap();
        let pm = post.posterior_moments(&x).unwrap();
        assert!((pred0.mean - pm.f_mean).amax() < 1e-15);
    }

    #[test]
    fn local_derivatives_match_finite_differences() {
        let post = fit_posterior(prior(), random_data(5, 4), 1e-6).unwrap();
        let x = dvector![0.2, -0.1];
        let loc = post.local(&x).unwrap();
        let h = 1e-5;
        for a in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[a] += h;
            xm[a] -= h;
            let dm = (post.mean(&xp).unwrap() - post.mean(&xm).unwrap()) / (2.0 * h);
            assert!((&dm - &loc.mean_jacobian[a]).amax() < 1e-6);
            let db = (post.cross_cov_b(&xp, &x).unwrap() - post.cross_cov_b(&xm, &x).unwrap()) / (2.0 * h);
            assert!((&db - &loc.cov_grad[a]).amax() < 1e-6);
            for b in 0..2 {
                let mut yp = x.clone();
                let mut ym = x.clone();
                yp[b] += h;
                ym[b] -= h;
                let d2 = (post.cross_cov_b(&xp, &yp).unwrap() - post.cross_cov_b(&xp, &ym).unwrap()
                    - post.cross_cov_b(&xm, &yp).unwrap()
                    + post.cross_cov_b(&xm, &ym).unwrap())
                    / (4.0 * h * h);
                assert!((&d2 - &loc.cov_cross_hessian[a][b]).amax() < 1e-4);
            }
        }
    }

    #[test]
    fn snapshot_round_trip_predicts_identically() {
        let post = fit_posterior(prior(), random_data(4, 5), 1e-6).unwrap();
        let json = serde_json::to_string(&post.snapshot().unwrap()).unwrap();
        let back: PosteriorSnapshot = serde_json::from_str(&json).unwrap();
        let restored = back.restore().unwrap();
        let x = dvector![0.3, 0.3];
        assert_eq!(post.mean(&x).unwrap(), restored.mean(&x).unwrap());
        assert_eq!(post.cross_cov_b(&x, &x).unwrap(), restored.cross_cov_b(&x, &x).unwrap());
    }

    #[test]
    fn dimension_errors() {
        let post = fit_posterior(prior(), random_data(2, 6), 1e-6).unwrap();
        assert!(post.mean(&dvector![0.0]).is_err());
        assert!(post.predict_xdot(&dvector![0.0, 0.0], &dvector![0.0, 1.0]).is_err());
        let mut bad = random_data(2, 6);
        bad.derivs[0] = dvector![1.0];
        assert!(fit_posterior(prior(), bad, 1e-6).is_err());
        assert!(fit_posterior(prior(), random_data(2, 6), -1.0).is_err());
    }
}
