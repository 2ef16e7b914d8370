//! Mean and variance of the relative-degree-1 barrier condition
//! `∇hᵀ F(x) u̲ + α h(x)` under the posterior, against Monte-Carlo draws.

use mvgp_cbf::barrier::cbc1_moments;
use mvgp_cbf::oracles::{random_posterior, sample_cbc, SampleStats};
use mvgp_cbf::sim::{pendulum_barriers, PendulumParams};
use nalgebra::dvector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mvgp_cbf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let post = random_posterior(&mut rng, 4, 1e-4)?;
    let (_, h1) = pendulum_barriers(&PendulumParams::default())?;
    let x = dvector![1.2, -0.3];
    for u in [-2.0, 0.0, 2.0] {
        let u = dvector![u];
        let m = cbc1_moments(&post, &h1, &x, &u)?;
        let s = SampleStats::from_samples(&sample_cbc(&post, &h1, &x, &u, 100_000, 9)?);
        println!(
            "u = {:+.1}: mean {:.4} (sampled {:.4}, {:.2} se), variance {:.4} (sampled {:.4}, {:.2} se)",
            u[0],
            m.mean,
            s.mean,
            s.mean_z(m.mean),
            m.variance,
            s.variance,
            s.variance_z(m.variance)
        );
    }
    Ok(())
}
