//! Run configuration: a sectioned TOML file with strict key checking and
//! dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envsim::Family;
use crate::epimodel::EpiModelConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::training::{Setting, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub family: Family,
    /// One `[lo, hi]` pair per randomized parameter; empty selects the
    /// family defaults.
    pub ranges: Vec<(f64, f64)>,
    pub dt: f64,
    /// 0 selects the family default.
    pub episode_limit: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            family: Family::SlidePuck,
            ranges: Vec::new(),
            dt: crate::envsim::constants::DT,
            episode_limit: 0,
        }
    }
}

impl EnvConfig {
    pub fn setting(&self) -> Result<Setting> {
        let ranges = if self.ranges.is_empty() {
            self.family.default_ranges()
        } else {
            self.ranges.clone()
        };
        let limit = if self.episode_limit == 0 {
            self.family.default_episode_limit()
        } else {
            self.episode_limit
        };
        Setting::new(self.family, &ranges, self.dt, limit).map_err(|e| Error::Config {
            key: "env".into(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub epsilon: f64,
    /// Epsilon-greedy transitions to collect (rounded up to whole episodes).
    pub transitions: usize,
    pub vine_anchors: usize,
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            transitions: 40_000,
            vine_anchors: 100,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Run directory.
    pub out: PathBuf,
    pub env: EnvConfig,
    pub dataset: DatasetConfig,
    pub epimodel: EpiModelConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            env: EnvConfig::default(),
            dataset: DatasetConfig::default(),
            epimodel: EpiModelConfig::default(),
            training: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_err(key: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Reports the first key of `given` that `reference` does not have.
fn check_keys(given: &toml::Table, reference: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in given {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match reference.get(k) {
            None => return Err(config_err(path, "unknown key")),
            Some(toml::Value::Table(r)) => match v {
                toml::Value::Table(g) => check_keys(g, r, &path)?,
                _ => return Err(config_err(path, "expected a section")),
            },
            Some(_) => {
                if v.is_table() {
                    return Err(config_err(path, "expected a value, found a section"));
                }
            }
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    fn reference() -> toml::Table {
        toml::Table::try_from(RunConfig::default()).expect("default config serializes")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn from_table(t: toml::Table) -> Result<Self> {
        check_keys(&t, &Self::reference(), "")?;
        let cfg: RunConfig = t.try_into().map_err(|e: toml::de::Error| config_err("<file>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let t: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err("<file>", e.message().to_string()))?;
        Self::from_table(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        Self::parse(&text)
    }

    /// Applies `key=value` assignments with dotted keys, such as
    /// `training.seed=5`. Values use TOML syntax; bare words are strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let reference = Self::reference();
        let mut t = toml::Table::try_from(self).expect("config serializes");
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| config_err(o.clone(), "override must have the form key=value"))?;
            let key = key.trim();
            let parts: Vec<&str> = key.split('.').collect();
            let mut r = &reference;
            let mut slot = &mut t;
            for (i, p) in parts.iter().enumerate() {
                let last = i + 1 == parts.len();
                match (r.get(*p), last) {
                    (Some(toml::Value::Table(_)), true) => return Err(config_err(key, "names a section, not a value")),
                    (Some(_), true) => {
                        slot.insert(p.to_string(), parse_value(raw.trim()));
                    }
                    (Some(toml::Value::Table(rt)), false) => {
                        r = rt;
                        slot = slot
                            .entry(p.to_string())
                            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                            .as_table_mut()
                            .ok_or_else(|| config_err(key, "expected a section"))?;
                    }
                    _ => return Err(config_err(key, "unknown key")),
                }
            }
        }
        Self::from_table(t).map_err(|e| match e {
            Error::Config { key, reason } if key == "<file>" => Error::Config {
                key: overrides.join(" "),
                reason,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.env.setting()?;
        if !(0.0..=1.0).contains(&self.dataset.epsilon) {
            return Err(config_err("dataset.epsilon", "must lie in [0, 1]"));
        }
        if !(self.dataset.val_fraction > 0.0 && self.dataset.val_fraction < 1.0) {
            return Err(config_err("dataset.val_fraction", "must lie in (0, 1)"));
        }
        if self.dataset.transitions == 0 {
            return Err(config_err("dataset.transitions", "must be positive"));
        }
        if self.dataset.vine_anchors == 0 && self.training.use_vine {
            return Err(config_err("dataset.vine_anchors", "must be positive when training.use_vine is set"));
        }
        if self.epimodel.minibatch == 0 {
            return Err(config_err("epimodel.minibatch", "must be positive"));
        }
        if self.eval.seeds == 0 {
            return Err(config_err("eval.seeds", "must be positive"));
        }
        if self.eval.episodes_per_env == 0 {
            return Err(config_err("eval.episodes_per_env", "must be positive"));
        }
        Ok(())
    }
}
