//! Run configuration as JSON with `--set key=value` overrides.

use std::path::Path;

use cirlab_core::model::{default_vocab, ModelConfig};
use cirlab_core::templates::BenchmarkKind;
use cirlab_core::train::{default_arms, ArmSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};
use crate::files::read_bytes;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub pairs: usize,
    pub triplets: usize,
    pub eval_queries: usize,
    pub index_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pairs: 2000,
            triplets: 2000,
            eval_queries: 500,
            index_size: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub benchmark: BenchmarkKind,
    pub arms: Vec<ArmSpec>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            benchmark: BenchmarkKind::SyntheticCircoLike,
            arms: default_arms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(default_vocab().len()),
            train: TrainConfig::toy_recipe(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

const SECTIONS: [&str; 5] = ["model", "train", "data", "eval", "ablation"];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(CliError::Usage("eval.ks must be a nonempty list of positive integers".into()));
        }
        if self.ablation.seeds.is_empty() || self.ablation.arms.is_empty() {
            return Err(CliError::Usage("ablation needs seeds and arms".into()));
        }
        Ok(())
    }

    /// Loads `path` (or the defaults) and applies the overrides in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => serde_json::from_slice(&read_bytes(p)?).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
            None => serde_json::to_value(RunConfig::default()).expect("defaults serialize"),
        };
        // a partial file is filled from the defaults first
        let mut full = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        merge(&mut full, value.take());
        for o in overrides {
            apply_override(&mut full, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(full).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Applies `key=value`. The key is a dotted path (`train.lr`) or a bare
/// field name found in exactly one section (`tau`). The value is read as
/// JSON, falling back to a plain string.
pub fn apply_override(config: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {assignment:?} is not key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(String::from).collect()
    } else {
        let owners: Vec<&str> = SECTIONS
            .iter()
            .copied()
            .filter(|s| config.get(s).and_then(|v| v.get(key)).is_some())
            .collect();
        match owners.as_slice() {
            [one] => vec![one.to_string(), key.to_string()],
            [] => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
            _ => return Err(CliError::Usage(format!("config key {key:?} is ambiguous; use section.{key}"))),
        }
    };
    let mut slot = &mut *config;
    for part in &path {
        slot = slot
            .get_mut(part.as_str())
            .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?;
    }
    *slot = value;
    Ok(())
}
