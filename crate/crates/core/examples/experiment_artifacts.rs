//! Load a config, run it, and list the artifacts. The same as `mvgp-cbf run`.
//!
//! `cargo run --release --example experiment_artifacts -- [config.json]`

use mvgp_cbf::config::{load_config, parse_config};
use mvgp_cbf::experiment::run_experiment;

fn main() -> mvgp_cbf::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => load_config(path)?,
        None => parse_config(r#"{ "preset": "paper-pendulum", "horizon": 200, "seed": 1 }"#)?,
    };
    let dir = std::env::temp_dir().join("mvgp-cbf-example");
    let out = run_experiment(&cfg, &dir)?;
    for entry in std::fs::read_dir(&dir)? {
        let e = entry?;
        println!("{:>9} bytes  {}", e.metadata()?.len(), e.path().display());
    }
    println!("min h {:.5}, rmse f {:.4}", out.summary.min_h, out.summary.final_rmse_f);
    Ok(())
}
