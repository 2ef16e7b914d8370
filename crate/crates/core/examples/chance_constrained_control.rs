//! Turn `ℙ(CBC ≥ ζ) ≥ p̃` into a second-order cone constraint, solve for the
//! control closest to a reference, and check the probability by sampling.

use mvgp_cbf::barrier::cbc_moments_local;
use mvgp_cbf::controller::{chance_to_deterministic, empirical_chance_check, solve_safe_control, ChanceMethod, ChanceSpec};
use mvgp_cbf::oracles::pendulum_posterior;
use mvgp_cbf::sim::{pendulum_barriers, PendulumParams};
use nalgebra::{dvector, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mvgp_cbf::Result<()> {
    let p = PendulumParams::default();
    let (h2, _) = pendulum_barriers(&p)?;
    let x = dvector![72f64.to_radians(), -0.4];
    let post = pendulum_posterior(&mut ChaCha8Rng::seed_from_u64(3), &p, &x, 12, 1e-4)?;
    let loc = post.local(&x)?;
    let u_ref = dvector![-15.0];
    let (lo, hi) = (dvector![-20.0], dvector![20.0]);
    for method in [ChanceMethod::GaussQuantile, ChanceMethod::Cantelli] {
        let spec = ChanceSpec::new(0.01, 0.9, method)?;
        let con = chance_to_deterministic(
            |u| cbc_moments_local(&loc, &h2, u).map(|m| (m.mean, m.raw_variance)),
            &spec,
            1,
        )?;
        let sol = solve_safe_control(&DMatrix::identity(1, 1), &u_ref, &con, &lo, &hi)?;
        let prob = empirical_chance_check(&post, &h2, &x, &sol.u, spec.zeta, 100_000, 8)?;
        println!(
            "{method:?}: β = {:.3}, u = {:.4} (reference {}), feasible {}, margin {:.2e}, sampled ℙ(CBC ≥ ζ) = {prob:.4}",
            spec.multiplier(),
            sol.u[0],
            u_ref[0],
            sol.feasible,
            sol.margin
        );
    }
    Ok(())
}
