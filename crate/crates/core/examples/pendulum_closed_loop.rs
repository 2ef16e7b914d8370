//! Online learning and safe filtering on the pendulum, several seeds.
//!
//! `cargo run --release --example pendulum_closed_loop -- [seeds] [horizon]`

use mvgp_cbf::sim::{bounding_grid, compare_learned_vs_true, run_closed_loop, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let horizon: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(500);
    for seed in 0..seeds {
        let cfg = SimConfig {
            seed,
            horizon,
            ..SimConfig::paper_pendulum()
        };
        let start = std::time::Instant::now();
        let log = run_closed_loop(&cfg)?;
        let grid = bounding_grid(&log.visited_states(), 20, 20)?;
        let rep = compare_learned_vs_true(&log.posterior, &cfg.params, &grid)?;
        println!(
            "seed {seed}: min h {:.4}, infeasible {}, negative refs rejected {}/{}, f rmse {:.3} (zero model {:.3}), {:.1}s",
            log.min_h,
            log.infeasible_steps,
            log.boundary.negative_rejected,
            log.boundary.negative_refs,
            rep.rmse_f,
            rep.rmse_f_zero,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
