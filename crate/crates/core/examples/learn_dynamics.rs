//! Learn `F(x) = [f(x) g(x)]` of the pendulum from one excited trajectory, then
//! score the posterior mean on a grid and round-trip it through JSON.

use mvgp_cbf::dyn_gp::{fit_posterior, Dataset, PosteriorSnapshot};
use mvgp_cbf::experiment::parse_grid_spec;
use mvgp_cbf::sim::{compare_learned_vs_true, integrate_zoh, PendulumParams, PriorSettings};
use nalgebra::{dvector, DVector};

fn main() -> mvgp_cbf::Result<()> {
    let p = PendulumParams::default();
    let dt = 0.01;
    let mut x = dvector![0.5, 0.0];
    let (mut states, mut controls, mut times) = (vec![x.clone()], Vec::new(), vec![0.0]);
    for k in 0..120 {
        let u = dvector![8.0 * (0.37 * k as f64).sin()];
        x = integrate_zoh(&p, &x, &u, dt, 10)?;
        controls.push(u);
        states.push(x.clone());
        times.push((k + 1) as f64 * dt);
    }
    let data = Dataset::from_trajectory(&states, &controls, &times)?;
    let post = fit_posterior(PriorSettings::default().build()?, data, 1e-6)?;

    let lo = states.iter().map(|s| s[0]).fold(f64::INFINITY, f64::min);
    let hi = states.iter().map(|s| s[0]).fold(f64::NEG_INFINITY, f64::max);
    let grid = parse_grid_spec(&format!("{lo}:{hi}:15,-1.5:1.5:15"))?;
    let rep = compare_learned_vs_true(&post, &p, &grid)?;
    println!("{} samples", post.len());
    println!("RMSE f {:.4} (zero model {:.4}), g {:.4} (zero model {:.4})", rep.rmse_f, rep.rmse_f_zero, rep.rmse_g, rep.rmse_g_zero);

    let probe: DVector<f64> = dvector![0.4, 0.2];
    let m = post.posterior_moments(&probe)?;
    println!("at {:?}: f ≈ {:.3?}, g ≈ {:.3?}", probe.as_slice(), m.f_mean.as_slice(), m.g_mean.as_slice());

    let json = serde_json::to_string(&post.snapshot()?)?;
    let back: PosteriorSnapshot = serde_json::from_str(&json)?;
    let again = back.restore()?;
    println!("snapshot {} bytes, restored mean difference {:.1e}", json.len(), (again.mean(&probe)? - post.mean(&probe)?).amax());
    Ok(())
}
