//! Reference computations that share no algebra with the structured code paths.
//!
//! * a dense vectorized GP conditioned by an explicit Schur complement,
//! * Monte-Carlo estimates of CBC and Lie-chain moments from posterior draws,
//! * central finite differences of kernel and posterior-kernel derivatives.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::barrier::BarrierFunction;
use crate::dyn_gp::{fit_posterior, AugmentedControl, Dataset, DynamicsPosterior, DynamicsPrior};
use crate::error::{Error, Result};
use crate::kernels::ScalarKernel;
use crate::linalg::{jittered_cholesky, psd_factor, rel_err, symmetrize, unvectorize, vectorize};
use crate::sim::{pendulum_true_dynamics, PendulumParams};

/// Stencil step for finite-difference Lie gradients in the samplers.
pub const STENCIL_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct DensePosterior {
    /// Posterior mean of `F(x)`.
    pub mean: DMatrix<f64>,
    /// cov(vec F(x), vec F(x')), n(1+m) square.
    pub cov: DMatrix<f64>,
}

/// Condition the joint Gaussian of `(vec Ẋ, vec F(x), vec F(x'))` directly.
///
/// Observation `i` is `F(xᵢ)u̲ᵢ` plus noise with covariance `jitter · A`.
pub fn dense_posterior(
    prior: &DynamicsPrior,
    data: &Dataset,
    jitter: f64,
    x: &DVector<f64>,
    xp: &DVector<f64>,
) -> Result<DensePosterior> {
    let n = prior.state_dim();
    let p = prior.ctrl_cov.nrows();
    let a = &prior.row_cov;
    let b = &prior.ctrl_cov;
    let kern = &prior.kernel;
    let k = data.len();
    let ubar: Vec<DVector<f64>> = data.controls.iter().map(|u| AugmentedControl::new(u).into_inner()).collect();

    let prior_cross = b.kronecker(a) * kern.value(x, xp);
    let m0 = vectorize(&prior.mean_at(x));
    if k == 0 {
        return Ok(DensePosterior {
            mean: unvectorize(&m0, n, p),
            cov: prior_cross,
        });
    }

    let mut kyy = DMatrix::zeros(k * n, k * n);
    for i in 0..k {
        for j in 0..k {
            let mut s = kern.value(&data.states[i], &data.states[j]) * ubar[i].dot(&(b * &ubar[j]));
            if i == j {
                s += jitter;
            }
            kyy.view_mut((i * n, j * n), (n, n)).copy_from(&(a * s));
        }
    }
    let cross = |z: &DVector<f64>| {
        let mut c = DMatrix::zeros(n * p, k * n);
        for i in 0..k {
            let bu = b * &ubar[i] * kern.value(z, &data.states[i]);
            c.view_mut((0, i * n), (n * p, n)).copy_from(&bu.kronecker(a));
        }
        c
    };
    let cx = cross(x);
    let cxp = cross(xp);
    let mut resid = DVector::zeros(k * n);
    for i in 0..k {
        let r = &data.derivs[i] - prior.mean_at(&data.states[i]) * &ubar[i];
        resid.rows_mut(i * n, n).copy_from(&r);
    }
    let chol = jittered_cholesky(&kyy, "dense observation covariance")?;
    let mean = m0 + &cx * chol.solve(&resid);
    let cov = prior_cross - &cx * chol.solve(&cxp.transpose());
    Ok(DensePosterior {
        mean: unvectorize(&mean, n, p),
        cov,
    })
}

/// Worst relative error of the structured posterior against the dense oracle,
/// as `(mean error, covariance error)`.
pub fn kronecker_vs_dense(post: &DynamicsPosterior, x: &DVector<f64>, xp: &DVector<f64>) -> Result<(f64, f64)> {
    let dense = dense_posterior(post.prior(), post.dataset(), post.jitter(), x, xp)?;
    let mean = post.mean(x)?;
    let cov = post.cross_cov_b(x, xp)?.kronecker(&post.prior().row_cov);
    Ok((rel_err(&mean, &dense.mean), rel_err(&cov, &dense.cov)))
}

/// Same comparison with the covariance sign flipped (`κB + WᵀG⁻¹W'`).
///
/// A sound oracle must reject this.
pub fn kronecker_vs_dense_flipped(post: &DynamicsPosterior, x: &DVector<f64>, xp: &DVector<f64>) -> Result<(f64, f64)> {
    let dense = dense_posterior(post.prior(), post.dataset(), post.jitter(), x, xp)?;
    let mean = post.mean(x)?;
    let prior_b = &post.prior().ctrl_cov * post.prior().kernel.value(x, xp);
    let flipped = &prior_b * 2.0 - post.cross_cov_b(x, xp)?;
    let cov = flipped.kronecker(&post.prior().row_cov);
    Ok((rel_err(&mean, &dense.mean), rel_err(&cov, &dense.cov)))
}

/// Sample mean and variance with their standard errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleStats {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub se_mean: f64,
    /// Standard error of the sample variance, from the sample fourth moment.
    pub se_variance: f64,
}

impl SampleStats {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        let variance = m2 * n / (n - 1.0);
        Self {
            count: xs.len(),
            mean,
            variance,
            se_mean: (variance / n).sqrt(),
            se_variance: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        }
    }

    /// `|mean − target|` in standard errors (0 when both are exactly equal).
    pub fn mean_z(&self, target: f64) -> f64 {
        z_score(self.mean - target, self.se_mean)
    }

    pub fn variance_z(&self, target: f64) -> f64 {
        z_score(self.variance - target, self.se_variance)
    }

    pub fn fraction_at_least(xs: &[f64], level: f64) -> f64 {
        xs.iter().filter(|x| **x >= level).count() as f64 / xs.len() as f64
    }
}

fn z_score(diff: f64, se: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY
    } else {
        diff.abs() / se
    }
}

/// Draw `F` jointly at the points `xs` from the posterior and hand each draw to `visit`.
pub fn sample_dynamics_jointly(
    post: &DynamicsPosterior,
    xs: &[DVector<f64>],
    samples: usize,
    seed: u64,
    mut visit: impl FnMut(&[DMatrix<f64>]),
) -> Result<()> {
    if samples == 0 || xs.is_empty() {
        return Err(Error::InvalidParameter("need at least one point and one sample".into()));
    }
    let n = post.state_dim();
    let p = post.control_dim() + 1;
    let d = n * p;
    let np = xs.len();
    let a = &post.prior().row_cov;
    let mut cov = DMatrix::zeros(d * np, d * np);
    let mut mean = DVector::zeros(d * np);
    for (i, xi) in xs.iter().enumerate() {
        mean.rows_mut(i * d, d).copy_from(&vectorize(&post.mean(xi)?));
        for (j, xj) in xs.iter().enumerate().skip(i) {
            let block = post.cross_cov_b(xi, xj)?.kronecker(a);
            cov.view_mut((i * d, j * d), (d, d)).copy_from(&block);
            cov.view_mut((j * d, i * d), (d, d)).copy_from(&block.transpose());
        }
    }
    let factor = psd_factor(&symmetrize(&cov), "joint posterior draw")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fs = vec![DMatrix::zeros(n, p); np];
    let mut z = DVector::zeros(d * np);
    for _ in 0..samples {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let draw = &mean + &factor * &z;
        for (i, f) in fs.iter_mut().enumerate() {
            f.copy_from_slice(draw.rows(i * d, d).as_slice());
        }
        visit(&fs);
    }
    Ok(())
}

/// `{x, x + εe₁, x − εe₁, …}`.
pub fn stencil(x: &DVector<f64>, eps: f64) -> Vec<DVector<f64>> {
    let mut pts = vec![x.clone()];
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += eps;
        xm[i] -= eps;
        pts.push(xp);
        pts.push(xm);
    }
    pts
}

/// `z = [∇L_f h; F u̲; L_f h]` from one joint draw at the stencil.
fn lie_sample(bf: &BarrierFunction, pts: &[DVector<f64>], fs: &[DMatrix<f64>], ub: &DVector<f64>, eps: f64) -> DVector<f64> {
    let n = pts[0].len();
    let lf = |i: usize| bf.grad(&pts[i]).dot(&fs[i].column(0));
    let mut z = DVector::zeros(2 * n + 1);
    for a in 0..n {
        z[a] = (lf(1 + 2 * a) - lf(2 + 2 * a)) / (2.0 * eps);
    }
    z.rows_mut(n, n).copy_from(&(&fs[0] * ub));
    z[2 * n] = lf(0);
    z
}

/// Monte-Carlo draws of the CBC at `(x, u)`.
///
/// Degree 1 draws `F(x)` alone; degree 2 draws at the finite-difference stencil
/// and evaluates `∇L_f hᵀ F u̲ + K₁h + K₂L_f h`.
pub fn sample_cbc(
    post: &DynamicsPosterior,
    bf: &BarrierFunction,
    x: &DVector<f64>,
    u: &DVector<f64>,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let ub = AugmentedControl::new(u).into_inner();
    let h = bf.value(x);
    let mut out = Vec::with_capacity(samples);
    match bf.relative_degree() {
        1 => {
            let grad = bf.grad(x);
            let alpha = bf.alpha();
            sample_dynamics_jointly(post, std::slice::from_ref(x), samples, seed, |fs| {
                out.push(grad.dot(&(&fs[0] * &ub)) + alpha * h);
            })?;
        }
        2 => {
            let (k1, k2) = (bf.gains()[0], bf.gains()[1]);
            let n = x.len();
            let pts = stencil(x, STENCIL_STEP);
            sample_dynamics_jointly(post, &pts, samples, seed, |fs| {
                let z = lie_sample(bf, &pts, fs, &ub, STENCIL_STEP);
                let inner = z.rows(0, n).dot(&z.rows(n, n));
                out.push(inner + k1 * h + k2 * z[2 * n]);
            })?;
        }
        r => return Err(Error::Barrier(format!("no sampler for relative degree {r}"))),
    }
    Ok(out)
}

/// Empirical mean and covariance of `z = [∇L_f h; F u̲; L_f h]`.
pub fn sample_lie_chain(
    post: &DynamicsPosterior,
    bf: &BarrierFunction,
    x: &DVector<f64>,
    u: &DVector<f64>,
    samples: usize,
    seed: u64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let ub = AugmentedControl::new(u).into_inner();
    let pts = stencil(x, STENCIL_STEP);
    let d = 2 * x.len() + 1;
    let mut sum = DVector::zeros(d);
    let mut outer = DMatrix::zeros(d, d);
    sample_dynamics_jointly(post, &pts, samples, seed, |fs| {
        let z = lie_sample(bf, &pts, fs, &ub, STENCIL_STEP);
        sum += &z;
        outer.ger(1.0, &z, &z, 1.0);
    })?;
    let s = samples as f64;
    let mean = sum / s;
    let cov = (outer - &mean * mean.transpose() * s) / (s - 1.0);
    Ok((mean, cov))
}

/// Worst `(gradient, cross-Hessian)` relative errors of a kernel against central
/// differences with step 1e-5.
pub fn kernel_derivative_errors(kernel: &ScalarKernel, x: &DVector<f64>, xp: &DVector<f64>) -> (f64, f64) {
    let h = 1e-5;
    let n = x.len();
    let grad = kernel.grad(x, xp);
    let hess = kernel.cross_hessian(x, xp);
    let mut eg = 0.0_f64;
    let mut eh = 0.0_f64;
    for a in 0..n {
        let mut xa = x.clone();
        let mut xb = x.clone();
        xa[a] += h;
        xb[a] -= h;
        let fd = (kernel.value(&xa, xp) - kernel.value(&xb, xp)) / (2.0 * h);
        eg = eg.max((fd - grad[a]).abs() / (1.0 + grad[a].abs()));
        for b in 0..n {
            let mut ya = xp.clone();
            let mut yb = xp.clone();
            ya[b] += h;
            yb[b] -= h;
            let fd = (kernel.grad(x, &ya)[a] - kernel.grad(x, &yb)[a]) / (2.0 * h);
            eh = eh.max((fd - hess[(a, b)]).abs() / (1.0 + hess[(a, b)].abs()));
        }
    }
    (eg, eh)
}

/// Worst `(first-derivative, cross-Hessian)` relative errors of the posterior
/// mean and covariance derivatives at `x`.
pub fn posterior_derivative_errors(post: &DynamicsPosterior, x: &DVector<f64>) -> Result<(f64, f64)> {
    let h = 1e-5;
    let n = x.len();
    let loc = post.local(x)?;
    let mut e1 = 0.0_f64;
    let mut e2 = 0.0_f64;
    let shift = |v: &DVector<f64>, i: usize, d: f64| {
        let mut w = v.clone();
        w[i] += d;
        w
    };
    for a in 0..n {
        let (xp, xm) = (shift(x, a, h), shift(x, a, -h));
        let dm = (post.mean(&xp)? - post.mean(&xm)?) / (2.0 * h);
        e1 = e1.max(rel_err(&dm, &loc.mean_jacobian[a]));
        let db = (post.cross_cov_b(&xp, x)? - post.cross_cov_b(&xm, x)?) / (2.0 * h);
        e1 = e1.max(rel_err(&db, &loc.cov_grad[a]));
        for b in 0..n {
            let (yp, ym) = (shift(x, b, h), shift(x, b, -h));
            let d2 = (post.cross_cov_b(&xp, &yp)? - post.cross_cov_b(&xp, &ym)? - post.cross_cov_b(&xm, &yp)?
                + post.cross_cov_b(&xm, &ym)?)
                / (4.0 * h * h);
            e2 = e2.max(rel_err(&d2, &loc.cov_cross_hessian[a][b]));
        }
    }
    Ok((e1, e2))
}

/// `LLᵀ + 0.2 I` with the entries of `L` uniform in `[−1, 1]`.
pub fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &l * l.transpose() + DMatrix::identity(n, n) * 0.2
}

fn uniform_vec(rng: &mut impl Rng, n: usize, r: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-r..r))
}

/// A random 2-state, 1-input prior conditioned on `k` random samples.
pub fn random_posterior(rng: &mut impl Rng, k: usize, jitter: f64) -> Result<DynamicsPosterior> {
    let kernel = ScalarKernel::squared_exponential(
        vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)],
        rng.random_range(0.5..2.0),
    )?;
    let prior = DynamicsPrior::new(random_spd(rng, 2), random_spd(rng, 2), kernel)?;
    let mut data = Dataset::default();
    for i in 0..k {
        let (x, u, xdot) = (uniform_vec(rng, 2, 2.0), uniform_vec(rng, 1, 3.0), uniform_vec(rng, 2, 3.0));
        data.push(x, u, xdot, i as f64)?;
    }
    fit_posterior(prior, data, jitter)
}

/// A unit prior conditioned on `k` exact pendulum derivatives drawn within
/// `±(0.3, 0.5)` of `center`.
pub fn pendulum_posterior(
    rng: &mut impl Rng,
    p: &PendulumParams,
    center: &DVector<f64>,
    k: usize,
    jitter: f64,
) -> Result<DynamicsPosterior> {
    let prior = DynamicsPrior::new(
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        ScalarKernel::squared_exponential(vec![1.0, 1.0], 1.0)?,
    )?;
    let mut data = Dataset::default();
    for i in 0..k {
        let x = center + DVector::from_vec(vec![rng.random_range(-0.3..0.3), rng.random_range(-0.5..0.5)]);
        let u = uniform_vec(rng, 1, 20.0);
        let (f, g) = pendulum_true_dynamics(&x, p);
        let xdot = f + g.column(0) * u[0];
        data.push(x, u, xdot, i as f64)?;
    }
    fit_posterior(prior, data, jitter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyn_gp::fit_posterior;
    use nalgebra::dvector;

    fn small_posterior() -> DynamicsPosterior {
        let prior = DynamicsPrior::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.7]),
            DMatrix::from_row_slice(2, 2, &[1.2, -0.2, -0.2, 0.9]),
            ScalarKernel::squared_exponential(vec![0.9, 0.6], 1.1).unwrap(),
        )
        .unwrap();
        let data = Dataset::new(
            vec![dvector![0.0, 0.1], dvector![0.4, -0.2], dvector![-0.3, 0.5]],
            vec![dvector![1.0], dvector![-0.5], dvector![2.0]],
            vec![dvector![0.2, -1.0], dvector![0.0, 0.4], dvector![1.1, 0.3]],
            vec![0.0, 1.0, 2.0],
        )
        .unwrap();
        fit_posterior(prior, data, 1e-3).unwrap()
    }

    #[test]
    fn dense_oracle_agrees_and_rejects_flipped_sign() {
        let post = small_posterior();
        let (x, xp) = (dvector![0.1, 0.0], dvector![-0.2, 0.3]);
        let (em, ec) = kronecker_vs_dense(&post, &x, &xp).unwrap();
        assert!(em < 1e-10 && ec < 1e-10, "{em:e} {ec:e}");
        let (_, ef) = kronecker_vs_dense_flipped(&post, &x, &xp).unwrap();
        assert!(ef > 1e-3);
    }

    #[test]
    fn sample_stats_basics() {
        let s = SampleStats::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.variance - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.mean_z(2.5), 0.0);
        let c = SampleStats::from_samples(&[1.0; 10]);
        assert_eq!(c.variance_z(0.0), 0.0);
        assert_eq!(c.mean_z(2.0), f64::INFINITY);
    }

    #[test]
    fn joint_draws_reproduce_point_covariance() {
        let post = small_posterior();
        let x = dvector![0.2, 0.2];
        let mut acc = Vec::new();
        sample_dynamics_jointly(&post, std::slice::from_ref(&x), 20000, 3, |fs| acc.push(fs[0][(0, 0)])).unwrap();
        let s = SampleStats::from_samples(&acc);
        let pm = post.posterior_moments(&x).unwrap();
        assert!(s.mean_z(pm.mean[(0, 0)]) < 4.0);
        assert!(s.variance_z(pm.kappa_f * post.prior().row_cov[(0, 0)]) < 4.0);
    }
}
