//! Run configuration: a TOML document with one section per stage, layered
//! with environment and command-line overrides.
//!
//! ```toml
//! seed = 0
//!
//! [dataset]
//! noise_std = 0.0
//!
//! [model]
//! widths = [16, 16, 32, 32]
//!
//! [training]
//! episodes = 1000
//! variant = "ix"
//! ```
//!
//! Precedence, lowest first: defaults, the file, `INSTA__SECTION__KEY`
//! environment variables, `--set section.key=value`, dedicated flags.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsl::{AblationConfig, EvalConfig, ModelConfig, SyntheticTaskConfig, TrainConfig};

pub const ENV_PREFIX: &str = "INSTA__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub c: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    /// Feature maps per timed batch.
    pub batch: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { c: 640, c_out: 640, h: 5, w: 5, k: 3, batch: 4, repeats: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { eps: 1e-6, tolerance: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: SyntheticTaskConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckConfig,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path` (dotted) in `table`, creating intermediate sections.
pub fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed key `{path}`")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("`{k}` in `{path}` is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Applies one `key=value` override.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    set_path(table, key.trim(), parse_value(raw.trim()))
}

/// Environment overrides: `INSTA__TRAINING__LR=0.01` sets `training.lr`.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<String> {
    let mut out: Vec<String> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some(format!("{}={v}", rest.to_lowercase().replace("__", ".")))
        })
        .collect();
    out.sort();
    out
}

impl RunConfig {
    /// Builds from an optional TOML source plus overrides, in order.
    pub fn layered(source: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = match source {
            Some(text) => toml::from_str::<toml::Table>(text).map_err(config_err)?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::layered(Some(text), &[])
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        for (what, way, shot) in [
            ("training", self.training.way, self.training.shot),
            ("eval", self.eval.way, self.eval.shot),
        ] {
            if way < 2 || shot < 1 {
                return Err(Error::Config(format!("{what} needs way ≥ 2 and shot ≥ 1, got {way} and {shot}")));
            }
            if way > self.dataset.class_count {
                return Err(Error::Config(format!(
                    "{what}.way {way} exceeds dataset.class_count {}",
                    self.dataset.class_count
                )));
            }
        }
        if !(self.gradcheck.eps >= 1e-7 && self.gradcheck.eps <= 1e-4) {
            return Err(Error::Config(format!("gradcheck.eps {} outside [1e-7, 1e-4]", self.gradcheck.eps)));
        }
        let b = &self.bench;
        if b.c == 0 || b.c_out == 0 || b.h == 0 || b.w == 0 || b.batch == 0 || b.k % 2 == 0 {
            return Err(Error::Config("bench extents must be positive and k odd".into()));
        }
        Ok(())
    }

    /// The effective configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}
