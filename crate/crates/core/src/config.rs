//! JSON experiment configuration.
//!
//! A config file is one JSON object. Every [`SimConfig`] field may appear at the
//! top level; nested sections (`params`, `chance`, `trigger`, `prior`) are merged
//! key by key over the defaults. Without a `preset`, `x0` is required.
//!
//! ```json
//! { "preset": "paper-pendulum", "angle_unit": "deg", "x0": [80, 0.0], "seed": 3 }
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::sim::SimConfig;

/// Environment variable holding the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "MVGP_CBF_OUTPUT";

pub const PRESETS: [&str; 2] = ["paper-pendulum", "paper-pendulum-150"];

const EXTRA_KEYS: [&str; 6] = ["preset", "angle_unit", "output_dir", "exports", "learning_grid", "oracles"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleUnit {
    Rad,
    Deg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Export {
    Trajectory,
    LearningError,
    Summary,
    Posterior,
}

impl Export {
    pub const ALL: [Export; 4] = [Export::Trajectory, Export::LearningError, Export::Summary, Export::Posterior];

    pub fn file_name(self) -> &'static str {
        match self {
            Export::Trajectory => "trajectory.csv",
            Export::LearningError => "learning_error.csv",
            Export::Summary => "summary.json",
            Export::Posterior => "posterior.json",
        }
    }
}

/// Which oracles `oracle` runs, at what size, and tolerance overrides by oracle name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSettings {
    pub dense_gp: bool,
    pub cbc1_monte_carlo: bool,
    pub cbc2_monte_carlo: bool,
    pub finite_difference: bool,
    pub instances: usize,
    pub samples: usize,
    pub seed: u64,
    pub tolerances: BTreeMap<String, f64>,
    /// Feed the dense-GP check a covariance with the data term added instead of
    /// subtracted. The check must then fail.
    pub flip_covariance_sign: bool,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            dense_gp: true,
            cbc1_monte_carlo: true,
            cbc2_monte_carlo: true,
            finite_difference: true,
            instances: 5,
            samples: 100_000,
            seed: 7,
            tolerances: BTreeMap::new(),
            flip_covariance_sign: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub sim: SimConfig,
    /// Relative paths resolve against [`OUTPUT_ROOT_ENV`].
    pub output_dir: PathBuf,
    pub exports: Vec<Export>,
    /// `[n_θ, n_ω]` of the learning-error grid over the visited box.
    pub learning_grid: [usize; 2],
    pub oracles: OracleSettings,
}

impl ExperimentConfig {
    pub fn from_sim(sim: SimConfig) -> Self {
        Self {
            preset: None,
            sim,
            output_dir: PathBuf::from("mvgp-cbf-out"),
            exports: Export::ALL.to_vec(),
            learning_grid: [20, 20],
            oracles: OracleSettings::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let sim = match name {
            "paper-pendulum" => SimConfig::paper_pendulum(),
            "paper-pendulum-150" => SimConfig::paper_pendulum_150(),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset \"{other}\" (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            preset: Some(name.to_string()),
            ..Self::from_sim(sim)
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.learning_grid.iter().any(|&n| n < 2) {
            return Err(Error::Config("learning_grid needs at least 2 points per axis".into()));
        }
        if self.exports.is_empty() {
            return Err(Error::Config("exports must name at least one artifact".into()));
        }
        if self.oracles.instances == 0 || self.oracles.samples < 1000 {
            return Err(Error::Config("oracles need instances ≥ 1 and samples ≥ 1000".into()));
        }
        if let Some((k, v)) = self.oracles.tolerances.iter().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::Config(format!("oracle tolerance \"{k}\" must be positive, got {v}")));
        }
        Ok(())
    }

    /// The resolved config as a JSON object, in radians, loadable by [`parse_config`].
    pub fn to_json(&self) -> Value {
        let mut obj = match serde_json::to_value(&self.sim) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("SimConfig serializes to an object"),
        };
        if let Some(p) = &self.preset {
            obj.insert("preset".into(), Value::String(p.clone()));
        }
        obj.insert("angle_unit".into(), Value::String("rad".into()));
        obj.insert("output_dir".into(), Value::String(self.output_dir.to_string_lossy().into_owned()));
        obj.insert("exports".into(), serde_json::to_value(&self.exports).unwrap_or_default());
        obj.insert("learning_grid".into(), serde_json::to_value(self.learning_grid).unwrap_or_default());
        obj.insert("oracles".into(), serde_json::to_value(&self.oracles).unwrap_or_default());
        Value::Object(obj)
    }

    /// `output_dir` if absolute, else joined onto `$MVGP_CBF_OUTPUT` (or the working directory).
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output_dir(&self.output_dir, std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
    }
}

pub fn resolve_output_dir(dir: &Path, root: Option<PathBuf>) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    root.unwrap_or_else(|| PathBuf::from(".")).join(dir)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let doc: Value = if text.trim().is_empty() {
        Value::Object(Map::new())
    } else {
        serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("parse error at line {}, column {}: {e}", e.line(), e.column()))
        })?
    };
    let Value::Object(mut user) = doc else {
        return Err(Error::Config("config must be a JSON object".into()));
    };

    let mut base = match user.remove("preset") {
        None => None,
        Some(Value::String(name)) => Some(ExperimentConfig::preset(&name)?),
        Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
    };
    let sim_keys: Vec<String> = match serde_json::to_value(SimConfig::paper_pendulum())? {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!("SimConfig serializes to an object"),
    };
    if let Some(k) = user
        .keys()
        .find(|k| !sim_keys.contains(k) && !EXTRA_KEYS.contains(&k.as_str()))
    {
        return Err(Error::Config(format!("unknown key \"{k}\"")));
    }
    if base.is_none() && !user.contains_key("x0") {
        return Err(Error::Config("missing required key: x0".into()));
    }

    let unit = match user.remove("angle_unit") {
        None => AngleUnit::Rad,
        Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(format!("angle_unit: {e}")))?,
    };
    if unit == AngleUnit::Deg {
        to_radians(&mut user)?;
    }

    let mut cfg = base.take().unwrap_or_else(|| ExperimentConfig::from_sim(SimConfig::paper_pendulum()));
    let schema = |what: &str, e: serde_json::Error| Error::Config(format!("schema violation in {what}: {e}"));
    if let Some(v) = user.remove("output_dir") {
        cfg.output_dir = serde_json::from_value(v).map_err(|e| schema("output_dir", e))?;
    }
    if let Some(v) = user.remove("exports") {
        let mut ex: Vec<Export> = serde_json::from_value(v).map_err(|e| schema("exports", e))?;
        ex.sort();
        ex.dedup();
        cfg.exports = ex;
    }
    if let Some(v) = user.remove("learning_grid") {
        cfg.learning_grid = serde_json::from_value(v).map_err(|e| schema("learning_grid", e))?;
    }
    if let Some(v) = user.remove("oracles") {
        let mut merged = serde_json::to_value(&cfg.oracles)?;
        merge(&mut merged, v);
        cfg.oracles = serde_json::from_value(merged).map_err(|e| schema("oracles", e))?;
    }
    let mut sim = serde_json::to_value(&cfg.sim)?;
    merge(&mut sim, Value::Object(user));
    cfg.sim = serde_json::from_value(sim).map_err(|e| schema("simulation settings", e))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Objects merge key by key; anything else replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Converts the user-supplied angles `x0[0]`, `params.theta_c` and `params.delta_col`.
fn to_radians(user: &mut Map<String, Value>) -> Result<()> {
    let convert = |v: &mut Value, what: &str| -> Result<()> {
        let deg = v
            .as_f64()
            .ok_or_else(|| Error::Config(format!("{what} must be a number")))?;
        *v = Value::from(deg.to_radians());
        Ok(())
    };
    if let Some(x0) = user.get_mut("x0") {
        match x0.as_array_mut().and_then(|a| a.first_mut()) {
            Some(theta) => convert(theta, "x0[0]")?,
            None => return Err(Error::Config("x0 must be an array [theta, omega]".into())),
        }
    }
    if let Some(Value::Object(p)) = user.get_mut("params") {
        for key in ["theta_c", "delta_col"] {
            if let Some(v) = p.get_mut(key) {
                convert(v, key)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_needs_x0() {
        for text in ["", "  \n", "{}"] {
            let err = parse_config(text).unwrap_err().to_string();
            assert!(err.contains("missing required key: x0"), "{err}");
        }
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse_config(r#"{"preset": "paper-pendulum", "foo": 1}"#).unwrap_err().to_string();
        assert!(err.contains("\"foo\""), "{err}");
        let err = parse_config(r#"{"preset": "paper-pendulum", "params": {"foo": 1}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("foo"), "{err}");
    }

    #[test]
    fn preset_matches_parameters() {
        let cfg = parse_config(r#"{"preset": "paper-pendulum"}"#).unwrap();
        assert_eq!(cfg.sim.x0[0], 75f64.to_radians());
        assert_eq!(cfg.sim.dt, 0.01);
        assert_eq!((cfg.sim.params.mass, cfg.sim.params.gravity, cfg.sim.params.length), (1.0, 10.0, 1.0));
        assert_eq!(cfg.sim, SimConfig::paper_pendulum());
    }

    #[test]
    fn degrees_convert_only_user_angles() {
        let cfg = parse_config(r#"{"angle_unit": "deg", "x0": [80, -0.5], "params": {"theta_c": 30}}"#).unwrap();
        assert!((cfg.sim.x0[0] - 80f64.to_radians()).abs() < 1e-15);
        assert_eq!(cfg.sim.x0[1], -0.5);
        assert!((cfg.sim.params.theta_c - 30f64.to_radians()).abs() < 1e-15);
        assert_eq!(cfg.sim.params.delta_col, 22.5f64.to_radians());
    }

    #[test]
    fn parse_errors_carry_line() {
        let err = parse_config("{\n  \"x0\": [1, 2],\n  oops\n}").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = parse_config(r#"{"preset": "paper-pendulum-150", "seed": 4, "exports": ["summary"]}"#).unwrap();
        cfg.oracles.tolerances.insert("dense_gp".into(), 1e-10);
        let back = parse_config(&cfg.to_json().to_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn output_dir_resolution() {
        let root = Some(PathBuf::from("/tmp/root"));
        assert_eq!(resolve_output_dir(Path::new("a/b"), root.clone()), PathBuf::from("/tmp/root/a/b"));
        assert_eq!(resolve_output_dir(Path::new("/abs"), root), PathBuf::from("/abs"));
        assert_eq!(resolve_output_dir(Path::new("a"), None), PathBuf::from("./a"));
    }

    #[test]
    fn bad_values_rejected() {
        assert!(parse_config(r#"{"preset": "nope"}"#).is_err());
        assert!(parse_config(r#"{"preset": "paper-pendulum", "dt": -1}"#).is_err());
        assert!(parse_config(r#"{"preset": "paper-pendulum", "learning_grid": [1, 5]}"#).is_err());
        assert!(parse_config("[1, 2]").is_err());
    }
}
