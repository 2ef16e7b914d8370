//! The pendulum barrier has relative degree 2: its condition
//! `L_f²h + L_gL_f h·u + K_α[h, L_f h]ᵀ` is a product of two Gaussian vectors
//! under the posterior. Compare its moments with joint sampling, and check the gains.

use mvgp_cbf::barrier::{cbc2_moments, lie_chain_moments, validate_kalpha};
use mvgp_cbf::oracles::{pendulum_posterior, sample_cbc, SampleStats};
use mvgp_cbf::sim::{pendulum_barriers, PendulumParams};
use nalgebra::dvector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mvgp_cbf::Result<()> {
    let p = PendulumParams::default();
    let (h2, _) = pendulum_barriers(&p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = dvector![75f64.to_radians(), -0.2];
    let post = pendulum_posterior(&mut rng, &p, &x, 4, 1e-2)?;

    let lie = lie_chain_moments(&post, &h2, &x, &dvector![0.0])?;
    println!("E[∇L_f h] = {:.4?}, E[L_f h] = {:.4}", lie.grad_lf_mean().as_slice(), lie.lf_mean());
    for u in [-10.0, 0.0, 10.0] {
        let u = dvector![u];
        let m = cbc2_moments(&post, &h2, &x, &u)?;
        let s = SampleStats::from_samples(&sample_cbc(&post, &h2, &x, &u, 100_000, 4)?);
        println!(
            "u = {:+5.1}: mean {:8.4} (sampled {:8.4}), variance {:8.4} (sampled {:8.4}, ratio {:.4})",
            u[0],
            m.mean,
            s.mean,
            m.variance,
            s.variance,
            s.variance / m.variance
        );
    }

    let eta0 = [h2.value(&x), 0.0];
    for k in [[1.0, 1.0], [1.0, 2.0], [4.0, 4.0]] {
        let c = validate_kalpha(&k, &eta0)?;
        let poles: Vec<String> = c.poles.iter().map(|z| format!("{:.3}{:+.3}i", z.re, z.im)).collect();
        println!("K_α = {k:?}: poles [{}], real and negative {}, ok {}", poles.join(", "), c.real_negative, c.ok);
    }
    Ok(())
}
