//! Pendulum environment and the online learn-and-filter loop.
//!
//! The true dynamics live here and are used only to advance the environment
//! and to score the learned model; the controller sees data and the posterior.

use std::sync::Arc;

use nalgebra::{dvector, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barrier::{cbc_moments_local, validate_kalpha, BarrierFunction, KalphaCheck};
use crate::controller::{chance_to_deterministic, solve_safe_control, ChanceMethod, ChanceSpec};
use crate::dyn_gp::{fit_posterior, AugmentedControl, Dataset, DynamicsPosterior, DynamicsPrior};
use crate::error::{Error, Result};
use crate::kernels::ScalarKernel;
use crate::trigger::{chi_bound, estimate_lipschitz, max_trigger_time, reachability_radius, TriggerParams};

/// Angles in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub theta_c: f64,
    pub delta_col: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            length: 1.0,
            gravity: 10.0,
            theta_c: 45f64.to_radians(),
            delta_col: 22.5f64.to_radians(),
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.length > 0.0 && self.gravity > 0.0) {
            return Err(Error::InvalidParameter("pendulum mass, length and gravity must be positive".into()));
        }
        if !(self.delta_col > 0.0 && self.delta_col < std::f64::consts::PI) {
            return Err(Error::InvalidParameter("delta_col must lie in (0, π)".into()));
        }
        if !self.theta_c.is_finite() {
            return Err(Error::InvalidParameter("theta_c must be finite".into()));
        }
        Ok(())
    }
}

/// `f = [ω, −(g/l) sin θ]`, `g = [0, 1/(ml)]`.
pub fn pendulum_true_dynamics(x: &DVector<f64>, p: &PendulumParams) -> (DVector<f64>, DMatrix<f64>) {
    let f = dvector![x[1], -(p.gravity / p.length) * x[0].sin()];
    let g = DMatrix::from_column_slice(2, 1, &[0.0, 1.0 / (p.mass * p.length)]);
    (f, g)
}

fn true_xdot(p: &PendulumParams, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let (f, g) = pendulum_true_dynamics(x, p);
    f + g * u
}

/// The pendulum barriers with `K_α = [1, 1]` and `α = 1`.
pub fn pendulum_barriers(p: &PendulumParams) -> Result<(BarrierFunction, BarrierFunction)> {
    pendulum_barriers_with_gains(p, [1.0, 1.0], 1.0)
}

/// `h₂ = cos Δ − cos(θ − θ_c)` (relative degree 2) and `h₁ = h₂ · (ω² + 1)` (relative degree 1).
///
/// Both are checked against finite differences, and `h₂` against `L_g h₂ = 0`, on a
/// fixed set of states.
pub fn pendulum_barriers_with_gains(
    p: &PendulumParams,
    k_alpha: [f64; 2],
    alpha: f64,
) -> Result<(BarrierFunction, BarrierFunction)> {
    p.validate()?;
    let (tc, cd) = (p.theta_c, p.delta_col.cos());
    let deg2 = BarrierFunction::new(
        "pendulum-angle",
        2,
        Arc::new(move |x| cd - (x[0] - tc).cos()),
        Arc::new(move |x| dvector![(x[0] - tc).sin(), 0.0]),
        Some(Arc::new(move |x| {
            DMatrix::from_row_slice(2, 2, &[(x[0] - tc).cos(), 0.0, 0.0, 0.0])
        })),
        2,
        k_alpha.to_vec(),
    )?;
    let deg1 = BarrierFunction::new(
        "pendulum-angle-velocity",
        2,
        Arc::new(move |x| (cd - (x[0] - tc).cos()) * (x[1] * x[1] + 1.0)),
        Arc::new(move |x| {
            let d = x[0] - tc;
            dvector![d.sin() * (x[1] * x[1] + 1.0), 2.0 * x[1] * (cd - d.cos())]
        }),
        Some(Arc::new(move |x| {
            let d = x[0] - tc;
            let w = x[1];
            DMatrix::from_row_slice(
                2,
                2,
                &[d.cos() * (w * w + 1.0), 2.0 * w * d.sin(), 2.0 * w * d.sin(), 2.0 * (cd - d.cos())],
            )
        })),
        1,
        vec![alpha],
    )?;
    let pts: Vec<DVector<f64>> = (0..24)
        .map(|i| {
            let t = i as f64;
            dvector![-3.0 + 0.27 * t, 2.0 * (0.7 * t).sin()]
        })
        .collect();
    deg2.verify_derivatives(&pts, 1e-5, 1e-5)?;
    deg1.verify_derivatives(&pts, 1e-5, 1e-5)?;
    let pc = *p;
    deg2.verify_relative_degree_two(move |x| pendulum_true_dynamics(x, &pc).1, &pts)?;
    Ok((deg2, deg1))
}

/// Analytic Lie derivatives of `h₂` under the true dynamics, `(L_f h, L_f² h, L_g L_f h)`.
pub fn pendulum_lie_derivatives(x: &DVector<f64>, p: &PendulumParams) -> (f64, f64, f64) {
    let d = x[0] - p.theta_c;
    let w = x[1];
    let lf = w * d.sin();
    let lf2 = w * w * d.cos() - (p.gravity / p.length) * x[0].sin() * d.sin();
    let lglf = d.sin() / (p.mass * p.length);
    (lf, lf2, lglf)
}

/// Classical RK4 with the control held, `substeps` steps of `dt / substeps`.
pub fn integrate_zoh(
    p: &PendulumParams,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    substeps: usize,
) -> Result<DVector<f64>> {
    if !(dt > 0.0) || substeps == 0 {
        return Err(Error::InvalidParameter(format!("integration needs dt > 0 and substeps ≥ 1 (dt {dt})")));
    }
    let h = dt / substeps as f64;
    let mut s = x.clone();
    for _ in 0..substeps {
        let k1 = true_xdot(p, &s, u);
        let k2 = true_xdot(p, &(&s + &k1 * (h / 2.0)), u);
        let k3 = true_xdot(p, &(&s + &k2 * (h / 2.0)), u);
        let k4 = true_xdot(p, &(&s + &k3 * h), u);
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            step: 0,
            reason: "non-finite state after integration".into(),
        });
    }
    Ok(s)
}

/// Wrap to (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = theta - two_pi * ((theta + std::f64::consts::PI) / two_pi).floor();
    if w <= -std::f64::consts::PI {
        w + two_pi
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierChoice {
    RelativeDegreeTwo,
    RelativeDegreeOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSettings {
    pub row_cov: Vec<Vec<f64>>,
    pub ctrl_cov: Vec<Vec<f64>>,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub jitter: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self {
            row_cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ctrl_cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            lengthscales: vec![1.0, 1.0],
            signal_variance: 1.0,
            jitter: 1e-6,
        }
    }
}

impl PriorSettings {
    pub fn build(&self) -> Result<DynamicsPrior> {
        let mat = |rows: &[Vec<f64>], what: &str| -> Result<DMatrix<f64>> {
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(Error::Config(format!("{what} must be square")));
            }
            Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
        };
        DynamicsPrior::new(
            mat(&self.row_cov, "row_cov")?,
            mat(&self.ctrl_cov, "ctrl_cov")?,
            ScalarKernel::squared_exponential(self.lengthscales.clone(), self.signal_variance)?,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSettings {
    pub b: f64,
    pub tau_cap: f64,
    /// Lower clamp on the applied hold time so that time always advances.
    pub tau_min: f64,
    pub lipschitz_floor: f64,
    pub lipschitz_radius: f64,
    pub chi_samples: usize,
}

impl Default for TriggerSettings {
    fn default() -> Self {
        Self {
            b: 1.0,
            tau_cap: 0.1,
            tau_min: 1e-3,
            lipschitz_floor: 1e-3,
            lipschitz_radius: 0.1,
            chi_samples: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub params: PendulumParams,
    pub x0: [f64; 2],
    pub dt: f64,
    pub substeps: usize,
    pub horizon: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: usize,
    pub u_bounds: (f64, f64),
    pub seed: u64,
    pub refit_every: usize,
    pub barrier: BarrierChoice,
    pub k_alpha: [f64; 2],
    pub alpha: f64,
    pub chance: ChanceSpec,
    pub q_weight: f64,
    pub trigger: TriggerSettings,
    pub prior: PriorSettings,
    /// States with `h` below this count as boundary-adjacent in the rejection statistics.
    pub boundary_h: f64,
}

impl SimConfig {
    /// θ₀ = 75°, ω₀ = −0.01, τ = 0.01, m = 1, g = 10, l = 1, θ_c = 45°, Δ = 22.5°,
    /// degree-2 barrier with `K_α = [1, 1]`, `u ∈ [−20, 20]`, ε from 1 to 0.01 over 100 steps.
    pub fn paper_pendulum() -> Self {
        Self {
            params: PendulumParams::default(),
            x0: [75f64.to_radians(), -0.01],
            dt: 0.01,
            substeps: 10,
            horizon: 500,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_decay_steps: 100,
            u_bounds: (-20.0, 20.0),
            seed: 0,
            refit_every: 1,
            barrier: BarrierChoice::RelativeDegreeTwo,
            k_alpha: [1.0, 1.0],
            alpha: 1.0,
            chance: ChanceSpec {
                zeta: 0.01,
                confidence: 0.9,
                method: ChanceMethod::Cantelli,
            },
            q_weight: 1.0,
            trigger: TriggerSettings::default(),
            prior: PriorSettings::default(),
            boundary_h: 0.05,
        }
    }

    /// Same as [`SimConfig::paper_pendulum`] but starting at θ₀ = 150°.
    pub fn paper_pendulum_150() -> Self {
        Self {
            x0: [150f64.to_radians(), -0.01],
            ..Self::paper_pendulum()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.chance.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.substeps == 0 || self.refit_every == 0 {
            return bad("substeps and refit_every must be at least 1");
        }
        if !(self.epsilon_end > 0.0 && self.epsilon_end <= self.epsilon_start && self.epsilon_start <= 1.0) {
            return bad("need 0 < epsilon_end ≤ epsilon_start ≤ 1");
        }
        if self.epsilon_decay_steps == 0 {
            return bad("epsilon_decay_steps must be at least 1");
        }
        if !(self.u_bounds.0 < self.u_bounds.1) {
            return bad("u_bounds need lo < hi");
        }
        if !(self.q_weight > 0.0) {
            return bad("q_weight must be positive");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        let t = &self.trigger;
        if !(t.b > 0.0 && t.tau_cap > 0.0 && t.tau_min > 0.0 && t.tau_min <= t.tau_cap) {
            return bad("trigger needs b > 0 and 0 < tau_min ≤ tau_cap");
        }
        if !(t.lipschitz_floor > 0.0 && t.lipschitz_radius > 0.0) || t.chi_samples < 8 {
            return bad("trigger needs positive Lipschitz floor/radius and chi_samples ≥ 8");
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return bad("x0 must be finite");
        }
        self.prior.build()?;
        Ok(())
    }

    pub fn barrier_function(&self) -> Result<BarrierFunction> {
        let (deg2, deg1) = pendulum_barriers_with_gains(&self.params, self.k_alpha, self.alpha)?;
        Ok(match self.barrier {
            BarrierChoice::RelativeDegreeTwo => deg2,
            BarrierChoice::RelativeDegreeOne => deg1,
        })
    }
}

/// ε(step) = max(ε_end, ε_start · exp(−step · ln(ε_start/ε_end) / decay_steps)).
pub fn exploration_rate(step: usize, cfg: &SimConfig) -> f64 {
    let rate = (cfg.epsilon_start / cfg.epsilon_end).ln() / cfg.epsilon_decay_steps as f64;
    (cfg.epsilon_start * (-(step as f64) * rate).exp()).max(cfg.epsilon_end)
}

/// ε-greedy reference: a uniform draw in the bounds with probability ε, otherwise `previous`.
pub fn reference_control(step: usize, cfg: &SimConfig, rng: &mut ChaCha8Rng, previous: &DVector<f64>) -> DVector<f64> {
    let eps = exploration_rate(step, cfg);
    // Both draws are always taken so the stream does not depend on the branch.
    let coin: f64 = rng.random();
    let draw = rng.random_range(cfg.u_bounds.0..=cfg.u_bounds.1);
    if coin < eps {
        dvector![draw]
    } else {
        previous.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub theta: f64,
    pub omega: f64,
    pub u: f64,
    pub u_ref: f64,
    pub h: f64,
    pub cbc_mean: f64,
    pub cbc_var: f64,
    pub tau_k: f64,
    pub feasible: bool,
    pub data_size: usize,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RmsePoint {
    pub step: usize,
    pub rmse_f: f64,
    pub rmse_g: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundaryStats {
    /// Boundary-adjacent steps with a negative reference.
    pub negative_refs: usize,
    /// Of those, steps where the applied control differs from the reference.
    pub negative_rejected: usize,
    pub positive_refs: usize,
    pub positive_passed: usize,
}

impl BoundaryStats {
    pub fn rejection_rate(&self) -> Option<f64> {
        (self.negative_refs > 0).then(|| self.negative_rejected as f64 / self.negative_refs as f64)
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryLog {
    pub records: Vec<StepRecord>,
    pub final_state: DVector<f64>,
    pub min_h: f64,
    pub rmse_trace: Vec<RmsePoint>,
    pub boundary: BoundaryStats,
    pub infeasible_steps: usize,
    pub unconverged_solves: usize,
    pub kalpha: Option<KalphaCheck>,
    /// Set when the environment produced a non-finite state.
    pub aborted: Option<String>,
    pub posterior: DynamicsPosterior,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Visited `(θ, ω)` states at every trigger.
    pub fn visited_states(&self) -> Vec<DVector<f64>> {
        self.records.iter().map(|r| dvector![r.theta, r.omega]).collect()
    }
}

/// Errors of the posterior mean against the true dynamics at one state.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridError {
    pub theta: f64,
    pub omega: f64,
    pub f_err: [f64; 2],
    pub g_err: [f64; 2],
    pub f_norm_err: f64,
    pub g_norm_err: f64,
    /// Marginal standard deviation of each F column, `√(B_k[j,j] · A_ii)`, for i = θ, ω.
    pub f_std: [f64; 2],
    pub g_std: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LearningReport {
    pub rows: Vec<GridError>,
    pub rmse_f: f64,
    pub rmse_g: f64,
    /// RMSE of the zero model (`‖truth‖`).
    pub rmse_f_zero: f64,
    pub rmse_g_zero: f64,
}

pub fn compare_learned_vs_true(
    post: &DynamicsPosterior,
    p: &PendulumParams,
    grid: &[DVector<f64>],
) -> Result<LearningReport> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("comparison grid is empty".into()));
    }
    let a = &post.prior().row_cov;
    let mut rows = Vec::with_capacity(grid.len());
    let (mut sf, mut sg, mut zf, mut zg) = (0.0, 0.0, 0.0, 0.0);
    for x in grid {
        let pm = post.posterior_moments(x)?;
        let (f, g) = pendulum_true_dynamics(x, p);
        let fe = &pm.f_mean - &f;
        let ge = pm.g_mean.column(0) - g.column(0);
        let std = |j: usize, i: usize| (pm.cov[(j, j)].max(0.0) * a[(i, i)]).sqrt();
        sf += fe.norm_squared();
        sg += ge.norm_squared();
        zf += f.norm_squared();
        zg += g.norm_squared();
        rows.push(GridError {
            theta: x[0],
            omega: x[1],
            f_err: [fe[0].abs(), fe[1].abs()],
            g_err: [ge[0].abs(), ge[1].abs()],
            f_norm_err: fe.norm(),
            g_norm_err: ge.norm(),
            f_std: [std(0, 0), std(0, 1)],
            g_std: [std(1, 0), std(1, 1)],
        });
    }
    let k = grid.len() as f64;
    Ok(LearningReport {
        rows,
        rmse_f: (sf / k).sqrt(),
        rmse_g: (sg / k).sqrt(),
        rmse_f_zero: (zf / k).sqrt(),
        rmse_g_zero: (zg / k).sqrt(),
    })
}

/// Regular `nθ × nω` grid over the bounding box of `states`.
pub fn bounding_grid(states: &[DVector<f64>], n_theta: usize, n_omega: usize) -> Result<Vec<DVector<f64>>> {
    if states.is_empty() || n_theta < 2 || n_omega < 2 {
        return Err(Error::InvalidParameter("grid needs states and at least 2 points per axis".into()));
    }
    let range = |i: usize| {
        states
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s[i]), hi.max(s[i])))
    };
    let (t0, t1) = range(0);
    let (w0, w1) = range(1);
    let mut out = Vec::with_capacity(n_theta * n_omega);
    for i in 0..n_theta {
        for j in 0..n_omega {
            out.push(dvector![
                t0 + (t1 - t0) * i as f64 / (n_theta - 1) as f64,
                w0 + (w1 - w0) * j as f64 / (n_omega - 1) as f64
            ]);
        }
    }
    Ok(out)
}

const RMSE_EVERY: usize = 50;

/// Observe, fit, filter, hold, repeat.
///
/// Each step appends the forward-difference sample of the previous hold,
/// attributed to the midpoint of the hold so the estimate is second order,
/// refits every `refit_every` samples, builds the chance constraint from the
/// CBC moments at the current state and solves for the control closest to the
/// ε-greedy reference. Degree-2 runs hold for `dt`; degree-1 runs hold for the
/// self-triggered `τ_k`, clamped to `[tau_min, tau_cap]`.
pub fn run_closed_loop(cfg: &SimConfig) -> Result<TrajectoryLog> {
    cfg.validate()?;
    let bf = cfg.barrier_function()?;
    let prior = cfg.prior.build()?;
    if prior.state_dim() != 2 || prior.control_dim() != 1 {
        return Err(Error::Config("the pendulum needs a 2-state, 1-input prior".into()));
    }
    let x0 = DVector::from_column_slice(&cfg.x0);
    if !(bf.value(&x0) > 0.0) {
        return Err(Error::Config(format!("x0 is not strictly safe (h = {})", bf.value(&x0))));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let q = DMatrix::from_element(1, 1, cfg.q_weight);
    let (lo, hi) = (dvector![cfg.u_bounds.0], dvector![cfg.u_bounds.1]);
    let mut data = Dataset::default();
    let mut post = fit_posterior(prior.clone(), data.clone(), cfg.prior.jitter)?;
    let mut x = x0;
    let mut t = 0.0;
    let mut prev_u = dvector![0.0];
    let mut last: Option<(DVector<f64>, DVector<f64>, f64, f64)> = None;
    let mut records = Vec::with_capacity(cfg.horizon);
    let mut rmse_trace = Vec::new();
    let mut boundary = BoundaryStats {
        negative_refs: 0,
        negative_rejected: 0,
        positive_refs: 0,
        positive_passed: 0,
    };
    let (mut infeasible_steps, mut unconverged_solves) = (0, 0);
    let mut min_h = f64::INFINITY;
    let mut aborted = None;
    let mut kalpha = None;
    let mut pending = 0;

    for step in 0..cfg.horizon {
        if let Some((xp, up, tp, tau)) = last.take() {
            let xdot = (&x - &xp) / tau;
            let mid = (&x + &xp) * 0.5;
            data.push(mid, up, xdot, tp + 0.5 * tau)?;
            pending += 1;
            if pending >= cfg.refit_every {
                post = fit_posterior(prior.clone(), data.clone(), cfg.prior.jitter)?;
                pending = 0;
            }
        }
        let h = bf.value(&x);
        min_h = min_h.min(h);

        let u_ref = reference_control(step, cfg, &mut rng, &prev_u);
        let loc = post.local(&x)?;
        if step == 0 && bf.relative_degree() == 2 {
            let lf = loc.f_mean().dot(&bf.grad(&x));
            kalpha = Some(validate_kalpha(bf.gains(), &[h, lf])?);
        }
        let moments = |u: &DVector<f64>| {
            let m = cbc_moments_local(&loc, &bf, u)?;
            Ok((m.mean, m.raw_variance))
        };
        let con = chance_to_deterministic(moments, &cfg.chance, 1)?;
        let sol = solve_safe_control(&q, &u_ref, &con, &lo, &hi)?;
        if !sol.feasible {
            infeasible_steps += 1;
        }
        if !sol.converged {
            unconverged_solves += 1;
        }
        let at_u = cbc_moments_local(&loc, &bf, &sol.u)?;

        let above = (x[0] - cfg.params.theta_c).sin() > 0.0;
        if h < cfg.boundary_h && above {
            let changed = (sol.u[0] - u_ref[0]).abs() > 1e-9;
            if u_ref[0] < 0.0 {
                boundary.negative_refs += 1;
                boundary.negative_rejected += changed as usize;
            } else if u_ref[0] > 0.0 {
                boundary.positive_refs += 1;
                boundary.positive_passed += (!changed) as usize;
            }
        }

        let tau = match bf.relative_degree() {
            1 => self_trigger_time(cfg, &post, &bf, &x, &sol.u)?,
            _ => cfg.dt,
        };
        records.push(StepRecord {
            t,
            theta: x[0],
            omega: x[1],
            u: sol.u[0],
            u_ref: u_ref[0],
            h,
            cbc_mean: at_u.mean,
            cbc_var: at_u.variance,
            tau_k: tau,
            feasible: sol.feasible,
            data_size: data.len(),
            margin: sol.margin,
        });

        if step % RMSE_EVERY == 0 && step > 0 {
            let visited: Vec<DVector<f64>> = records.iter().map(|r| dvector![r.theta, r.omega]).collect();
            let rep = compare_learned_vs_true(&post, &cfg.params, &bounding_grid(&visited, 15, 15)?)?;
            rmse_trace.push(RmsePoint {
                step,
                rmse_f: rep.rmse_f,
                rmse_g: rep.rmse_g,
            });
        }

        let substeps = ((tau / cfg.dt) * cfg.substeps as f64).ceil().max(1.0) as usize;
        match integrate_zoh(&cfg.params, &x, &sol.u, tau, substeps) {
            Ok(next) => {
                last = Some((x, sol.u.clone(), t, tau));
                x = next;
                t += tau;
                prev_u = sol.u;
            }
            Err(e) => {
                aborted = Some(format!("step {step}: {e}"));
                break;
            }
        }
    }
    if aborted.is_none() {
        min_h = min_h.min(bf.value(&x));
    }
    Ok(TrajectoryLog {
        records,
        final_state: x,
        min_h,
        rmse_trace,
        boundary,
        infeasible_steps,
        unconverged_solves,
        kalpha,
        aborted,
        posterior: post,
    })
}

fn self_trigger_time(
    cfg: &SimConfig,
    post: &DynamicsPosterior,
    bf: &BarrierFunction,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<f64> {
    let ts = &cfg.trigger;
    let xdot = post.mean(x)? * AugmentedControl::new(u).into_inner();
    let xdot_norm = xdot.norm();
    let lipschitz = estimate_lipschitz(post, x, u, ts.lipschitz_radius, ts.lipschitz_floor)?;
    let reach = reachability_radius(lipschitz, xdot_norm, ts.tau_cap)?;
    let chi = chi_bound(bf, x, reach, ts.chi_samples)?.max(1e-12);
    let params = TriggerParams {
        lipschitz,
        b: ts.b,
        l_alpha_h: bf.alpha() * chi,
        tau_cap: ts.tau_cap,
    };
    Ok(max_trigger_time(&params, cfg.chance.zeta, chi, xdot_norm)?.max(ts.tau_min))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dynamics_examples() {
        let p = PendulumParams::default();
        let (f, g) = pendulum_true_dynamics(&dvector![0.0, 0.0], &p);
        assert_eq!(f, dvector![0.0, 0.0]);
        assert_eq!(g.column(0).into_owned(), dvector![0.0, 1.0]);
        let (f, _) = pendulum_true_dynamics(&dvector![std::f64::consts::FRAC_PI_2, 0.0], &p);
        assert!((f[1] + 10.0).abs() < 1e-12 && f[0] == 0.0);
    }

    #[test]
    fn barrier_examples() {
        let p = PendulumParams::default();
        let (h2, h1) = pendulum_barriers(&p).unwrap();
        assert!((h2.value(&dvector![p.theta_c, 0.3]) - (p.delta_col.cos() - 1.0)).abs() < 1e-15);
        assert!(h2.value(&dvector![p.theta_c + p.delta_col, 0.0]).abs() < 1e-15);
        assert_eq!(h2.relative_degree(), 2);
        assert_eq!(h1.relative_degree(), 1);
        let x = dvector![1.2, 0.4];
        assert!((h1.value(&x) - h2.value(&x) * 1.16).abs() < 1e-15);
    }

    #[test]
    fn lie_derivatives_match_finite_differences() {
        let p = PendulumParams::default();
        let (h2, _) = pendulum_barriers(&p).unwrap();
        let lf = |x: &DVector<f64>| h2.grad(x).dot(&pendulum_true_dynamics(x, &p).0);
        for x in [dvector![1.3, 0.4], dvector![-0.5, -2.0], dvector![2.9, 1.1]] {
            let (l1, l2, lg) = pendulum_lie_derivatives(&x, &p);
            assert!((l1 - lf(&x)).abs() < 1e-12);
            let e = 1e-6;
            let grad = dvector![
                (lf(&(&x + dvector![e, 0.0])) - lf(&(&x - dvector![e, 0.0]))) / (2.0 * e),
                (lf(&(&x + dvector![0.0, e])) - lf(&(&x - dvector![0.0, e]))) / (2.0 * e)
            ];
            let (f, g) = pendulum_true_dynamics(&x, &p);
            assert!((grad.dot(&f) - l2).abs() < 1e-6);
            assert!((grad.dot(&g.column(0)) - lg).abs() < 1e-6);
        }
    }

    #[test]
    fn gravity_cancelling_control_holds_still() {
        let p = PendulumParams::default();
        let x: DVector<f64> = dvector![0.7, 0.0];
        let u = dvector![p.mass * p.length * (p.gravity / p.length) * x[0].sin()];
        let next = integrate_zoh(&p, &x, &u, 0.5, 50).unwrap();
        assert!((next - x).amax() < 1e-9);
    }

    #[test]
    fn exploration_schedule() {
        let cfg = SimConfig::paper_pendulum();
        assert_eq!(exploration_rate(0, &cfg), 1.0);
        assert!((exploration_rate(100, &cfg) - 0.01).abs() < 1e-12);
        assert_eq!(exploration_rate(400, &cfg), 0.01);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|s| reference_control(s, &cfg, &mut rng, &dvector![0.5])[0]).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn wrapping() {
        use std::f64::consts::PI;
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_step_run() {
        let cfg = SimConfig {
            horizon: 1,
            ..SimConfig::paper_pendulum()
        };
        let log = run_closed_loop(&cfg).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.records[0].t, 0.0);
        assert!(log.kalpha.as_ref().is_some_and(|k| !k.real_negative));
    }

    #[test]
    fn untrained_comparison_equals_truth_norm() {
        let p = PendulumParams::default();
        let prior = PriorSettings::default().build().unwrap();
        let post = fit_posterior(prior, Dataset::default(), 1e-6).unwrap();
        let grid = vec![dvector![0.3, 1.0], dvector![2.0, -0.5]];
        let rep = compare_learned_vs_true(&post, &p, &grid).unwrap();
        for (row, x) in rep.rows.iter().zip(&grid) {
            let (f, g) = pendulum_true_dynamics(x, &p);
            assert!((row.f_norm_err - f.norm()).abs() < 1e-15);
            assert!((row.g_norm_err - g.norm()).abs() < 1e-15);
        }
    }
}
