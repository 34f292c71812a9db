//! Experiment configuration: a TOML file with sections, plus `key=value`
//! overrides addressed by dotted paths such as `train.epochs=5`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};
use crate::synthgen::GenerateConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Also train the visual-only and tactile-only models.
    pub baselines: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            baselines: false,
        }
    }
}

/// Everything a run needs. Every field has a default and unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Dataset directory, written by `generate` and read by the other commands.
    pub dataset: PathBuf,
    /// Run directory for checkpoints, metrics and artifacts.
    pub output: PathBuf,
    pub generate: GenerateConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs/default"),
            generate: GenerateConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Named starting points for a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// 30 epochs of batch 32; sized for a laptop CPU.
    Desk,
    /// 100 epochs of batch 64.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile `{s}` (desk, paper)"))),
        }
    }
}

impl ExperimentConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::default(),
            Profile::Paper => Self {
                train: TrainConfig::paper(),
                ..Self::default()
            },
        }
    }

    /// Resolves a config: the profile's defaults, then the file (if any),
    /// then each `path=value` override in order.
    pub fn resolve(profile: Profile, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Table::try_from(Self::profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))?;
            merge(&mut tree, user);
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: Self = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.augment.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.generate.table.validate()?;
        if let Some(c) = self.generate.classes.iter().find(|&&c| c >= crate::dataset::NUM_CLASSES) {
            return Err(Error::Config(format!("class id {c} out of range")));
        }
        if self.model.tactile.window == 0 || self.model.tactile.stride == 0 {
            return Err(Error::Config("tactile window and stride must be >= 1".into()));
        }
        if self.model.attention.heads == 0 {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        Ok(())
    }
}

/// Deep merge: tables merge key by key, anything else replaces.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise, so `fusion=sum` and `seeds=[1,2]`
/// both work.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key `{path}`")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut table = tree;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("`{k}` in `{path}` is not a section"))),
        };
    }
    let last = keys[keys.len() - 1].to_string();
    // integers given for float fields stay valid
    let value = match (table.get(&last), value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    table.insert(last, value);
    Ok(())
}
