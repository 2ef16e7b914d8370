use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mvgp_cbf::config::{load_config, resolve_output_dir, ExperimentConfig, OUTPUT_ROOT_ENV};
use mvgp_cbf::experiment::{compare_posterior, run_experiment, run_oracle_suite};
use mvgp_cbf::sim::PendulumParams;

/// Safe online learning on the pendulum: run experiments, check oracles, score posteriors.
///
/// Relative output directories resolve against $MVGP_CBF_OUTPUT.
/// Exit codes: 0 success, 1 config or runtime error, 2 oracle failure.
#[derive(Parser)]
#[command(name = "mvgp-cbf", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the closed loop and write trajectory.csv, learning_error.csv, summary.json, posterior.json.
    Run {
        config: PathBuf,
        /// Overrides the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the oracle suite and write oracle_report.json.
    Oracle {
        config: PathBuf,
        /// Tolerance override, e.g. `--tol dense_gp=1e-10`. Repeatable.
        #[arg(long = "tol", value_name = "NAME=VALUE")]
        tolerances: Vec<String>,
        /// Mutation check: the dense-GP oracle must then fail.
        #[arg(long)]
        flip_covariance_sign: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a saved posterior against the true pendulum on `lo:hi:n,lo:hi:n` (radians).
    Compare {
        posterior: PathBuf,
        grid: String,
        /// Config whose pendulum parameters define the truth. Defaults to m = l = 1, g = 10.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Oracle,
}

fn out_dir(output: Option<PathBuf>, cfg: Option<&ExperimentConfig>) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    match (output, cfg) {
        (Some(p), _) => resolve_output_dir(&p, root),
        (None, Some(c)) => c.resolved_output_dir(),
        (None, None) => resolve_output_dir(Path::new("mvgp-cbf-out"), root),
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    let cfg_err = |e: mvgp_cbf::Error| Failure::Config(e.to_string());
    match cmd {
        Cmd::Run { config, output } => {
            let cfg = load_config(&config).map_err(cfg_err)?;
            let dir = out_dir(output, Some(&cfg));
            let out = run_experiment(&cfg, &dir).map_err(cfg_err)?;
            let s = &out.summary;
            println!(
                "{} steps, min h {:.6}, rmse f {:.4} (zero model {:.4}), infeasible steps {}, wrote {}",
                s.steps,
                s.min_h,
                s.final_rmse_f,
                s.zero_rmse_f,
                s.solver.infeasible_steps,
                dir.display()
            );
            Ok(())
        }
        Cmd::Oracle {
            config,
            tolerances,
            flip_covariance_sign,
            output,
        } => {
            let mut cfg = load_config(&config).map_err(cfg_err)?;
            for t in &tolerances {
                let (name, value) = t
                    .split_once('=')
                    .and_then(|(n, v)| v.trim().parse::<f64>().ok().map(|v| (n.trim().to_string(), v)))
                    .ok_or_else(|| Failure::Config(format!("--tol expects NAME=VALUE, got \"{t}\"")))?;
                cfg.oracles.tolerances.insert(name, value);
            }
            cfg.oracles.flip_covariance_sign |= flip_covariance_sign;
            let dir = out_dir(output, Some(&cfg));
            let report = run_oracle_suite(&cfg, &dir).map_err(cfg_err)?;
            for c in &report.checks {
                println!(
                    "{} {:<20} observed {:.3e} tolerance {:.3e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.observed,
                    c.tolerance
                );
            }
            if report.passed {
                Ok(())
            } else {
                Err(Failure::Oracle)
            }
        }
        Cmd::Compare {
            posterior,
            grid,
            config,
            output,
        } => {
            let cfg = config.map(load_config).transpose().map_err(cfg_err)?;
            let params = cfg.as_ref().map(|c| c.sim.params).unwrap_or_else(PendulumParams::default);
            let dir = out_dir(output, cfg.as_ref());
            let grid = match std::fs::read_to_string(&grid) {
                Ok(text) => text,
                Err(_) => grid,
            };
            let report = compare_posterior(&posterior, &grid, &params, &dir).map_err(cfg_err)?;
            println!(
                "{} points, rmse f {:.6} g {:.6} (zero model f {:.6} g {:.6})",
                report.rows.len(),
                report.rmse_f,
                report.rmse_g,
                report.rmse_f_zero,
                report.rmse_g_zero
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Oracle) => {
            eprintln!("error: oracle failure");
            ExitCode::from(2)
        }
    }
}
