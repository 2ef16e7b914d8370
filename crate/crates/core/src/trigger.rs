//! Self-triggered sampling for relative-degree-1 barriers.
//!
//! Between triggers the control is held, and the state stays within
//! `r̄(s) = ‖ẋ_k‖ (e^{Ls} − 1) / L` of `x_k`. The constraint tightening `ζ`
//! buys the time `τ_k` for which the barrier condition still holds.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::barrier::BarrierFunction;
use crate::dyn_gp::{AugmentedControl, DynamicsPosterior};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerParams {
    /// Lipschitz constant of `x ↦ F(x) u̲_k`.
    pub lipschitz: f64,
    /// Confidence rate, `q = 1 − e^{−bL}`.
    pub b: f64,
    /// Lipschitz constant of `α ∘ h`.
    pub l_alpha_h: f64,
    pub tau_cap: f64,
}

impl TriggerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lipschitz > 0.0) || !(self.b > 0.0) || !(self.tau_cap > 0.0) || !(self.l_alpha_h >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "trigger parameters need L, b, tau_cap > 0 and L_alpha_h ≥ 0: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn confidence(&self) -> f64 {
        -(-self.b * self.lipschitz).exp_m1()
    }
}

/// `‖ẋ‖ (e^{Ls} − 1) / L`, which tends to `‖ẋ‖ s` as `L → 0`.
pub fn reachability_radius(lipschitz: f64, xdot_norm: f64, s: f64) -> Result<f64> {
    if !(lipschitz >= 0.0) || !(xdot_norm >= 0.0) || !(s >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "reachability radius needs nonnegative inputs (L {lipschitz}, ‖ẋ‖ {xdot_norm}, s {s})"
        )));
    }
    if lipschitz == 0.0 {
        return Ok(xdot_norm * s);
    }
    Ok(xdot_norm * (lipschitz * s).exp_m1() / lipschitz)
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// The first `count` Halton points of `[−1, 1]ⁿ` that fall in the unit ball.
pub fn halton_ball(n: usize, count: usize) -> Result<Vec<DVector<f64>>> {
    if n == 0 || n > PRIMES.len() {
        return Err(Error::Dimension(format!("Halton ball sampling supports 1..={} dimensions", PRIMES.len())));
    }
    let mut out = Vec::with_capacity(count);
    let mut i = 1u64;
    while out.len() < count {
        let p = DVector::from_fn(n, |d, _| 2.0 * radical_inverse(i, PRIMES[d]) - 1.0);
        if p.norm() <= 1.0 {
            out.push(p);
        }
        i += 1;
    }
    Ok(out)
}

/// Geometric radius ladder `2^{j/8}` used by [`chi_bound`].
const LADDER_STEPS_PER_OCTAVE: f64 = 8.0;

/// Upper estimate of `sup ‖∇h‖` over the ball `B(x, radius)`, inflated by 5%.
///
/// The ball is probed at every ladder radius `2^{j/8}` from `1e-9 · (1 + ‖x‖)` up
/// to the first one at or above `radius`, each time with the same `samples`
/// Halton points, plus the center. Reusing the ladder makes the result
/// nondecreasing in `radius`, at the price of probing up to 9% past it.
pub fn chi_bound(bf: &BarrierFunction, x: &DVector<f64>, radius: f64, samples: usize) -> Result<f64> {
    if samples < 8 {
        return Err(Error::InvalidParameter(format!("chi_bound needs at least 8 samples, got {samples}")));
    }
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::InvalidParameter(format!("radius must be ≥ 0, got {radius}")));
    }
    let mut best = bf.grad(x).norm();
    if radius > 0.0 {
        let pts = halton_ball(x.len(), samples)?;
        let floor = 1e-9 * (1.0 + x.norm());
        let lo = (floor.log2() * LADDER_STEPS_PER_OCTAVE).floor() as i64;
        let hi = (radius.max(floor).log2() * LADDER_STEPS_PER_OCTAVE).ceil() as i64;
        for j in lo..=hi {
            let rho = (j as f64 / LADDER_STEPS_PER_OCTAVE).exp2();
            for s in &pts {
                best = best.max(bf.grad(&(x + s * rho)).norm());
            }
        }
    }
    Ok(1.05 * best)
}

/// `min(tau_cap, ln(1 + Lζ / ((χL + L_{α∘h}) ‖ẋ‖)) / L)`, or `tau_cap` when `‖ẋ‖ ≤ 1e-12`.
pub fn max_trigger_time(params: &TriggerParams, zeta: f64, chi: f64, xdot_norm: f64) -> Result<f64> {
    params.validate()?;
    if !(zeta >= 0.0) || !(chi > 0.0) || !(xdot_norm >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "trigger time needs ζ ≥ 0, χ > 0, ‖ẋ‖ ≥ 0 (got {zeta}, {chi}, {xdot_norm})"
        )));
    }
    if xdot_norm <= 1e-12 {
        return Ok(params.tau_cap);
    }
    let l = params.lipschitz;
    let tau = (l * zeta / ((chi * l + params.l_alpha_h) * xdot_norm)).ln_1p() / l;
    Ok(tau.min(params.tau_cap))
}

/// Twice the largest difference quotient of the posterior-mean `F̂(·) u̲` over 64
/// Halton points in `B(x, radius)`, never below `floor`.
pub fn estimate_lipschitz(
    post: &DynamicsPosterior,
    x: &DVector<f64>,
    u: &DVector<f64>,
    radius: f64,
    floor: f64,
) -> Result<f64> {
    if !(radius > 0.0) || !(floor > 0.0) {
        return Err(Error::InvalidParameter("Lipschitz estimate needs radius, floor > 0".into()));
    }
    let ub = AugmentedControl::new(u).into_inner();
    let pts: Vec<DVector<f64>> = halton_ball(x.len(), 64)?.into_iter().map(|s| x + s * radius).collect();
    let vals = pts
        .iter()
        .map(|p| Ok(post.mean(p)? * &ub))
        .collect::<Result<Vec<_>>>()?;
    let mut slope = 0.0_f64;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let dx = (&pts[i] - &pts[j]).norm();
            if dx > 0.0 {
                slope = slope.max((&vals[i] - &vals[j]).norm() / dx);
            }
        }
    }
    Ok((2.0 * slope).max(floor))
}
