use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_mvgp-cbf");

fn cli(args: &[&str], root: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .env("MVGP_CBF_OUTPUT", root)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn single_step_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "one.json", r#"{"preset": "paper-pendulum", "horizon": 1, "output_dir": "one"}"#);
    let out = cli(&["run", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let dir = tmp.path().join("one");
    let traj = fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    let lines: Vec<&str> = traj.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "t,theta,omega,u,u_ref,h,cbc_mean,cbc_var,tau_k,feasible");
    assert_eq!(lines[1].split(',').count(), 10);

    let summary = read_json(&dir.join("summary.json"));
    assert!(summary["min_h"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["seed"], 0);
    assert_eq!(summary["config"]["horizon"], 1);
    assert!(dir.join("learning_error.csv").exists());
    assert!(dir.join("posterior.json").exists());
}

#[test]
fn equal_configs_give_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"preset": "paper-pendulum", "horizon": 80, "seed": 3}"#);
    for name in ["a", "b"] {
        let out = cli(&["run", &cfg, "--output", name], tmp.path());
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    for file in ["trajectory.csv", "learning_error.csv"] {
        assert_eq!(sha(&tmp.path().join("a").join(file)), sha(&tmp.path().join("b").join(file)), "{file}");
    }
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("", "missing required key: x0"),
        (r#"{"preset": "paper-pendulum", "foo": 2}"#, "\"foo\""),
        ("{\n  \"horizon\": 4,\n  oops\n}", "line 3"),
        (r#"{"preset": "nope"}"#, "nope"),
    ];
    for (i, (text, needle)) in cases.iter().enumerate() {
        let cfg = write_config(tmp.path(), &format!("bad{i}.json"), text);
        let out = cli(&["run", &cfg], tmp.path());
        assert_eq!(out.status.code(), Some(1), "case {i}");
        assert!(stderr(&out).contains(needle), "case {i}: {}", stderr(&out));
    }
    let out = cli(&["run", &tmp.path().join("absent.json").to_string_lossy()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(cli(&[], tmp.path()).status.code(), Some(1));
    assert_eq!(cli(&["frobnicate"], tmp.path()).status.code(), Some(1));
    assert_eq!(cli(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn unwritable_output_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("blocker"), "x").unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"preset": "paper-pendulum", "horizon": 1}"#);
    let out = cli(&["run", &cfg, "--output", "blocker/inner"], tmp.path());
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"preset": "paper-pendulum", "horizon": 2, "output_dir": "nested/run"}"#);
    let root = tmp.path().join("root");
    let out = cli(&["run", &cfg], &root);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(root.join("nested/run/trajectory.csv").exists());
}

const QUICK_ORACLE: &str = r#"{"preset": "paper-pendulum", "oracles": {"instances": 3}}"#;

#[test]
fn oracle_suite_passes_and_echoes_tolerances() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "o.json", QUICK_ORACLE);
    let out = cli(&["oracle", &cfg, "--tol", "dense_gp=1e-9", "--output", "rep"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = read_json(&tmp.path().join("rep/oracle_report.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["overridden_tolerances"]["dense_gp"], 1e-9);
    let dense = report["checks"].as_array().unwrap().iter().find(|c| c["name"] == "dense_gp").unwrap();
    assert_eq!(dense["tolerance"], 1e-9);
}

#[test]
fn flipped_covariance_sign_fails_the_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "o.json", QUICK_ORACLE);
    let out = cli(&["oracle", &cfg, "--flip-covariance-sign", "--output", "rep"], tmp.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let report = read_json(&tmp.path().join("rep/oracle_report.json"));
    let dense = report["checks"].as_array().unwrap().iter().find(|c| c["name"] == "dense_gp").unwrap();
    assert_eq!(dense["passed"], false);
}

#[test]
fn bad_tolerance_flags_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "o.json", QUICK_ORACLE);
    for flag in ["dense_gp", "dense_gp=abc", "no_such_check=1e-3"] {
        let out = cli(&["oracle", &cfg, "--tol", flag], tmp.path());
        assert_eq!(out.status.code(), Some(1), "{flag}");
    }
}

#[test]
fn compare_scores_a_saved_posterior() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"preset": "paper-pendulum", "horizon": 60, "output_dir": "run"}"#);
    assert_eq!(cli(&["run", &cfg], tmp.path()).status.code(), Some(0));
    let post = tmp.path().join("run/posterior.json");
    let out = cli(&["compare", &post.to_string_lossy(), "0.9:1.4:4,-1:1:3", "--output", "cmp"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = fs::read_to_string(tmp.path().join("cmp/learning_error.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12);

    let out = cli(&["compare", &post.to_string_lossy(), "0:1"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        mvgp_cbf::config::load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 3);
}
