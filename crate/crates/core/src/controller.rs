//! Chance-constrained safe control.
//!
//! `ℙ(CBC(u) ≥ ζ) ≥ p̃` becomes the second-order cone constraint
//! `E[CBC](u) − ζ ≥ β √Var[CBC](u)` with `E` affine and `Var` quadratic in `u`,
//! and the control minimizes `(u − u_ref)ᵀ Q (u − u_ref)` over it and a box.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf_inv;

use crate::barrier::BarrierFunction;
use crate::dyn_gp::DynamicsPosterior;
use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::oracles::{sample_cbc, SampleStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChanceMethod {
    /// `β = √2 |erf⁻¹(1 − 2p̃)|`, exact for a Gaussian CBC.
    GaussQuantile,
    /// `β = √(p̃ / (1 − p̃))`, valid for any distribution with these moments.
    Cantelli,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChanceSpec {
    pub zeta: f64,
    pub confidence: f64,
    pub method: ChanceMethod,
}

impl ChanceSpec {
    pub fn new(zeta: f64, confidence: f64, method: ChanceMethod) -> Result<Self> {
        let s = Self {
            zeta,
            confidence,
            method,
        };
        s.validate()?;
        Ok(s)
    }

    /// `p̃ = 0.5` is admitted as the degenerate `β = 0` case.
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta >= 0.0) || !self.zeta.is_finite() {
            return Err(Error::InvalidParameter(format!("zeta must be ≥ 0, got {}", self.zeta)));
        }
        if !(self.confidence >= 0.5 && self.confidence < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "confidence must lie in [0.5, 1), got {}",
                self.confidence
            )));
        }
        Ok(())
    }

    pub fn multiplier(&self) -> f64 {
        multiplier(self.method, self.confidence)
    }
}

pub fn multiplier(method: ChanceMethod, p: f64) -> f64 {
    match method {
        ChanceMethod::GaussQuantile => 2f64.sqrt() * erf_inv(1.0 - 2.0 * p).abs(),
        ChanceMethod::Cantelli => (p / (1.0 - p)).sqrt(),
    }
}

/// `E(u) = cᵀu + d`, `Var(u) = uᵀPu + qᵀu + r`, with margin `E − ζ − β√Var`.
#[derive(Clone, Debug, PartialEq)]
pub struct SocConstraint {
    pub c: DVector<f64>,
    pub d: f64,
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub r: f64,
    pub beta: f64,
    pub zeta: f64,
}

impl SocConstraint {
    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn mean(&self, u: &DVector<f64>) -> f64 {
        self.c.dot(u) + self.d
    }

    pub fn variance(&self, u: &DVector<f64>) -> f64 {
        (u.dot(&(&self.p * u)) + self.q.dot(u) + self.r).max(0.0)
    }

    pub fn margin(&self, u: &DVector<f64>) -> f64 {
        self.mean(u) - self.zeta - self.beta * self.variance(u).sqrt()
    }

    /// Margin with its gradient and Hessian; the square root is smoothed by 1e-14.
    fn margin_derivatives(&self, u: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let s = (self.variance(u) + 1e-14).sqrt();
        let ds = (&self.p * u + &self.q * 0.5) / s;
        let d2s = (&self.p - &ds * ds.transpose()) / s;
        let phi = self.mean(u) - self.zeta - self.beta * s;
        (phi, &self.c - &ds * self.beta, -d2s * self.beta)
    }
}

/// Extract the affine mean and quadratic variance of `moment_fn` by exact interpolation.
///
/// `moment_fn(u)` must return `(mean, variance)` with the variance before any
/// clamping. Probes are `0`, `eᵢ`, `2eᵢ` and `eᵢ + eⱼ`; one extra probe checks the
/// fit and a residual above `1e-8 · (1 + |value|)` is reported as an error.
pub fn chance_to_deterministic(
    moment_fn: impl Fn(&DVector<f64>) -> Result<(f64, f64)>,
    spec: &ChanceSpec,
    m: usize,
) -> Result<SocConstraint> {
    spec.validate()?;
    if m == 0 {
        return Err(Error::Dimension("control dimension must be at least 1".into()));
    }
    let e = |i: usize, s: f64| {
        let mut v = DVector::zeros(m);
        v[i] = s;
        v
    };
    let (d, r) = moment_fn(&DVector::zeros(m))?;
    let mut c = DVector::zeros(m);
    let mut q = DVector::zeros(m);
    let mut p = DMatrix::zeros(m, m);
    let mut unit = Vec::with_capacity(m);
    for i in 0..m {
        let (m1, v1) = moment_fn(&e(i, 1.0))?;
        let (_, v2) = moment_fn(&e(i, 2.0))?;
        c[i] = m1 - d;
        p[(i, i)] = (v2 - 2.0 * v1 + r) / 2.0;
        q[i] = v1 - r - p[(i, i)];
        unit.push(v1);
    }
    for i in 0..m {
        for j in i + 1..m {
            let (_, vij) = moment_fn(&(e(i, 1.0) + e(j, 1.0)))?;
            let pij = (vij - unit[i] - unit[j] + r) / 2.0;
            p[(i, j)] = pij;
            p[(j, i)] = pij;
        }
    }

    let probe = DVector::from_fn(m, |i, _| if i % 2 == 0 { -0.7 } else { 0.3 } + 0.1 * i as f64);
    let (mp, vp) = moment_fn(&probe)?;
    let mean_fit = c.dot(&probe) + d;
    let var_fit = probe.dot(&(&p * &probe)) + q.dot(&probe) + r;
    let residual = ((mp - mean_fit).abs() / (1.0 + mp.abs())).max((vp - var_fit).abs() / (1.0 + vp.abs()));
    if residual > 1e-8 {
        return Err(Error::NotPolynomial { residual });
    }

    let eig = SymmetricEigen::new(symmetrize(&p));
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let p = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    Ok(SocConstraint {
        c,
        d,
        p: symmetrize(&p),
        q,
        r: r.max(0.0),
        beta: spec.multiplier(),
        zeta: spec.zeta,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlSolution {
    pub u: DVector<f64>,
    pub objective: f64,
    pub feasible: bool,
    /// `E[CBC] − ζ − β√Var` at `u`.
    pub margin: f64,
    pub iterations: usize,
    /// False when the iteration budget ran out before the tolerance was met.
    pub converged: bool,
}

fn objective(q: &DMatrix<f64>, u: &DVector<f64>, u_ref: &DVector<f64>) -> f64 {
    let e = u - u_ref;
    e.dot(&(q * &e))
}

fn clamp_box(u: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(u.len(), |i, _| u[i].clamp(lo[i], hi[i]))
}

/// Golden-section maximization of a unimodal function on `[a, b]`.
fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> (f64, usize) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    let mut n = 0;
    while n < iters && b - a > 1e-13 * (1.0 + a.abs().max(b.abs())) {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        }
        n += 1;
    }
    let mut best = (a, f(a));
    for x in [x1, x2, b] {
        let fx = f(x);
        if fx > best.1 {
            best = (x, fx);
        }
    }
    (best.0, n)
}

/// Boundary of `{φ ≥ 0}` between a feasible `inside` and an infeasible `outside`.
fn bisect_boundary(f: impl Fn(f64) -> f64, mut inside: f64, mut outside: f64) -> (f64, usize) {
    let mut n = 0;
    while (outside - inside).abs() > 1e-10 && n < 200 {
        let mid = 0.5 * (inside + outside);
        if f(mid) >= 0.0 {
            inside = mid;
        } else {
            outside = mid;
        }
        n += 1;
    }
    (inside, n)
}

/// Maximize the margin over the box: a coarse grid followed by coordinate-wise
/// golden-section sweeps.
pub fn maximize_margin(con: &SocConstraint, lo: &DVector<f64>, hi: &DVector<f64>) -> (DVector<f64>, usize) {
    let m = con.dim();
    let per_dim = if m <= 2 { 101 } else { (1e6f64.powf(1.0 / m as f64) as usize).max(3) };
    let mut best = lo.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut idx = vec![0usize; m];
    let mut u = DVector::zeros(m);
    loop {
        for i in 0..m {
            u[i] = lo[i] + (hi[i] - lo[i]) * idx[i] as f64 / (per_dim - 1) as f64;
        }
        let v = con.margin(&u);
        if v > best_val {
            best_val = v;
            best.copy_from(&u);
        }
        let mut k = 0;
        while k < m {
            idx[k] += 1;
            if idx[k] < per_dim {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == m {
            break;
        }
    }
    let mut iters = 0;
    for _ in 0..50 {
        let before = con.margin(&best);
        for i in 0..m {
            let h = (hi[i] - lo[i]) / (per_dim - 1) as f64;
            let (a, b) = ((best[i] - h).max(lo[i]), (best[i] + h).min(hi[i]));
            let base = best.clone();
            let (xi, n) = golden_max(
                |t| {
                    let mut trial = base.clone();
                    trial[i] = t;
                    con.margin(&trial)
                },
                a,
                b,
                200,
            );
            iters += n;
            let mut cand = best.clone();
            cand[i] = xi;
            if con.margin(&cand) >= con.margin(&best) {
                best = cand;
            }
        }
        if con.margin(&best) - before <= 1e-14 * (1.0 + before.abs()) {
            break;
        }
    }
    (best, iters)
}

fn validate_problem(q: &DMatrix<f64>, u_ref: &DVector<f64>, con: &SocConstraint, lo: &DVector<f64>, hi: &DVector<f64>) -> Result<()> {
    let m = con.dim();
    if q.shape() != (m, m) || u_ref.len() != m || lo.len() != m || hi.len() != m || con.p.shape() != (m, m) || con.q.len() != m {
        return Err(Error::Dimension(format!("safe-control problem with inconsistent dimension {m}")));
    }
    if (q - q.transpose()).amax() > 1e-12 * (1.0 + q.amax()) || nalgebra::Cholesky::new(q.clone()).is_none() {
        return Err(Error::InvalidParameter("Q must be symmetric positive definite".into()));
    }
    if (0..m).any(|i| !(lo[i] < hi[i])) {
        return Err(Error::InvalidParameter("control bounds need lo < hi".into()));
    }
    Ok(())
}

/// Minimize `(u − u_ref)ᵀQ(u − u_ref)` subject to the cone constraint and `lo ≤ u ≤ hi`.
///
/// An infeasible problem returns the margin maximizer with `feasible = false`.
pub fn solve_safe_control(
    q: &DMatrix<f64>,
    u_ref: &DVector<f64>,
    con: &SocConstraint,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> Result<ControlSolution> {
    validate_problem(q, u_ref, con, lo, hi)?;
    let finish = |u: DVector<f64>, feasible: bool, iterations: usize, converged: bool| ControlSolution {
        objective: objective(q, &u, u_ref),
        margin: con.margin(&u),
        u,
        feasible,
        iterations,
        converged,
    };
    let clamped = clamp_box(u_ref, lo, hi);
    if con.margin(&clamped) >= 0.0 {
        return Ok(finish(clamped, true, 0, true));
    }
    if con.dim() == 1 {
        return Ok(solve_scalar(con, u_ref[0], lo[0], hi[0], &finish));
    }
    let (start, it0) = maximize_margin(con, lo, hi);
    if con.margin(&start) < 0.0 {
        return Ok(finish(start, false, it0, true));
    }
    let (u, iters, converged) = log_barrier(q, u_ref, con, lo, hi, start);
    Ok(finish(u, true, it0 + iters, converged))
}

fn solve_scalar(
    con: &SocConstraint,
    u_ref: f64,
    lo: f64,
    hi: f64,
    finish: &dyn Fn(DVector<f64>, bool, usize, bool) -> ControlSolution,
) -> ControlSolution {
    let phi = |t: f64| con.margin(&DVector::from_element(1, t));
    let (best, mut iters) = golden_max(phi, lo, hi, 400);
    if phi(best) < 0.0 {
        return finish(DVector::from_element(1, best), false, iters, true);
    }
    let (left, n1) = if phi(lo) >= 0.0 { (lo, 0) } else { bisect_boundary(phi, best, lo) };
    let (right, n2) = if phi(hi) >= 0.0 { (hi, 0) } else { bisect_boundary(phi, best, hi) };
    iters += n1 + n2;
    finish(DVector::from_element(1, u_ref.clamp(left, right)), true, iters, true)
}

/// Interior-point path with `μ = 1, 0.1, …, 1e-8` and damped Newton steps.
fn log_barrier(
    q: &DMatrix<f64>,
    u_ref: &DVector<f64>,
    con: &SocConstraint,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    start: DVector<f64>,
) -> (DVector<f64>, usize, bool) {
    let m = con.dim();
    // Pull the start strictly inside the box.
    let mut u = DVector::from_fn(m, |i, _| {
        let w = 1e-9 * (hi[i] - lo[i]);
        start[i].clamp(lo[i] + w, hi[i] - w)
    });
    if con.margin(&u) <= 0.0 {
        return (start, 0, true);
    }
    let barrier = |u: &DVector<f64>, mu: f64| -> f64 {
        let phi = con.margin(u);
        if phi <= 0.0 || (0..m).any(|i| u[i] <= lo[i] || u[i] >= hi[i]) {
            return f64::INFINITY;
        }
        let mut b = phi.ln();
        for i in 0..m {
            b += (u[i] - lo[i]).ln() + (hi[i] - u[i]).ln();
        }
        objective(q, u, u_ref) - mu * b
    };
    let mut iters = 0;
    let mut converged = true;
    let mut mu = 1.0;
    while mu >= 1e-8 * 0.999 {
        let mut inner_ok = false;
        for _ in 0..100 {
            iters += 1;
            let (phi, dphi, d2phi) = con.margin_derivatives(&u);
            let mut grad = q * (&u - u_ref) * 2.0 - &dphi * (mu / phi);
            let mut hess = q * 2.0 + (&dphi * dphi.transpose()) * (mu / (phi * phi)) - &d2phi * (mu / phi);
            for i in 0..m {
                let (a, b) = (u[i] - lo[i], hi[i] - u[i]);
                grad[i] += -mu / a + mu / b;
                hess[(i, i)] += mu / (a * a) + mu / (b * b);
            }
            let step = match nalgebra::Cholesky::new(symmetrize(&hess)) {
                Some(ch) => -ch.solve(&grad),
                None => -&grad,
            };
            let decrement = -grad.dot(&step);
            if decrement.abs() < 1e-12 * (1.0 + barrier(&u, mu).abs()) {
                inner_ok = true;
                break;
            }
            let f0 = barrier(&u, mu);
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-14 {
                let cand = &u + &step * t;
                if barrier(&cand, mu) <= f0 - 0.25 * t * decrement {
                    u = cand;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                inner_ok = true;
                break;
            }
        }
        converged &= inner_ok;
        mu *= 0.1;
    }
    (u, iters, converged)
}

/// Monte-Carlo estimate of `ℙ(CBC ≥ ζ)` under the posterior.
pub fn empirical_chance_check(
    post: &DynamicsPosterior,
    bf: &BarrierFunction,
    x: &DVector<f64>,
    u: &DVector<f64>,
    zeta: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples < 1000 {
        return Err(Error::InvalidParameter(format!(
            "at least 1000 samples are needed, got {samples}"
        )));
    }
    let draws = sample_cbc(post, bf, x, u, samples, seed)?;
    Ok(SampleStats::fraction_at_least(&draws, zeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn scalar_con(c: f64, d: f64, p: f64, q: f64, r: f64, beta: f64, zeta: f64) -> SocConstraint {
        SocConstraint {
            c: dvector![c],
            d,
            p: DMatrix::from_element(1, 1, p),
            q: dvector![q],
            r,
            beta,
            zeta,
        }
    }

    fn one() -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }

    #[test]
    fn multipliers() {
        assert!(multiplier(ChanceMethod::GaussQuantile, 0.5).abs() < 1e-15);
        assert!((multiplier(ChanceMethod::Cantelli, 0.95) - 19f64.sqrt()).abs() < 1e-12);
        assert!((multiplier(ChanceMethod::GaussQuantile, 0.9) - 1.2815515655446004).abs() < 1e-9);
        assert!(ChanceSpec::new(0.0, 1.0, ChanceMethod::Cantelli).is_err());
        assert!(ChanceSpec::new(-0.1, 0.9, ChanceMethod::Cantelli).is_err());
        assert!(ChanceSpec::new(0.1, 0.4, ChanceMethod::Cantelli).is_err());
    }

    #[test]
    fn extraction_is_exact_for_polynomials() {
        let spec = ChanceSpec::new(0.0, 0.9, ChanceMethod::Cantelli).unwrap();
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let moment = |u: &DVector<f64>| Ok((1.0 + 2.0 * u[0] - u[1], u.dot(&(&p * u)) + 0.3 * u[0] + 4.0));
        let con = chance_to_deterministic(moment, &spec, 2).unwrap();
        assert!((&con.c - dvector![2.0, -1.0]).amax() < 1e-12);
        assert!((&con.p - &p).amax() < 1e-12);
        assert!((&con.q - dvector![0.3, 0.0]).amax() < 1e-12 && (con.r - 4.0).abs() < 1e-12);
        let cubic = |u: &DVector<f64>| Ok((u[0], u[0].powi(3) + 1.0));
        assert!(matches!(chance_to_deterministic(cubic, &spec, 1), Err(Error::NotPolynomial { .. })));
    }

    #[test]
    fn unconstrained_and_active_affine() {
        let lo = dvector![-20.0];
        let hi = dvector![20.0];
        let con = scalar_con(1.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let s = solve_safe_control(&one(), &dvector![1.5], &con, &lo, &hi).unwrap();
        assert_eq!(s.u[0], 1.5);
        let con = scalar_con(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0);
        let s = solve_safe_control(&one(), &dvector![0.0], &con, &lo, &hi).unwrap();
        assert!(s.feasible && (s.u[0] - 2.0).abs() < 1e-9 && s.margin >= 0.0);
    }

    #[test]
    fn scalar_solution_matches_brute_force() {
        let con = scalar_con(-1.0, 1.0, 0.5, 0.2, 0.4, 1.3, 0.1);
        let (lo, hi) = (dvector![-20.0], dvector![20.0]);
        let s = solve_safe_control(&one(), &dvector![3.0], &con, &lo, &hi).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=400_000 {
            let u = -20.0 + 40.0 * i as f64 / 400_000.0;
            if con.margin(&dvector![u]) >= 0.0 && (u - 3.0).powi(2) < best.0 {
                best = ((u - 3.0).powi(2), u);
            }
        }
        assert!(s.feasible && (s.u[0] - best.1).abs() < 1e-4);
    }

    #[test]
    fn infeasible_returns_margin_maximizer() {
        let con = scalar_con(0.0, -1.0, 1.0, 0.0, 1.0, 1.0, 0.0);
        let s = solve_safe_control(&one(), &dvector![5.0], &con, &dvector![-20.0], &dvector![20.0]).unwrap();
        assert!(!s.feasible && s.u[0].abs() < 1e-6);
    }

    #[test]
    fn two_dimensional_barrier_solution() {
        let con = SocConstraint {
            c: dvector![1.0, 1.0],
            d: 0.0,
            p: DMatrix::identity(2, 2) * 0.1,
            q: dvector![0.0, 0.0],
            r: 0.1,
            beta: 1.0,
            zeta: 1.0,
        };
        let q = DMatrix::identity(2, 2);
        let (lo, hi) = (dvector![-20.0, -20.0], dvector![20.0, 20.0]);
        let s = solve_safe_control(&q, &dvector![0.0, 0.0], &con, &lo, &hi).unwrap();
        assert!(s.feasible && s.margin >= -1e-6);
        // By symmetry the optimum is u₁ = u₂ = t with 2t − 1 = √(0.2t² + 0.1).
        let t = (4.0 + (16.0f64 - 4.0 * 3.8 * 0.9).sqrt()) / (2.0 * 3.8);
        assert!((s.u[0] - t).abs() < 1e-5 && (s.u[1] - t).abs() < 1e-5, "{:?} vs {t}", s.u);
    }

    #[test]
    fn rejects_bad_problems() {
        let con = scalar_con(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let lo = dvector![-1.0];
        let hi = dvector![1.0];
        assert!(solve_safe_control(&(-one()), &dvector![0.0], &con, &lo, &hi).is_err());
        assert!(solve_safe_control(&one(), &dvector![0.0], &con, &hi, &lo).is_err());
    }
}
