//! Pipeline configuration: built-in defaults, then an optional JSON file,
//! then `dotted.key=value` overrides. Keys absent from the defaults are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::embedding::DVECTOR_DIM;
use crate::error::{PseError, Result};
use crate::metrics::MetricParams;
use crate::models::{ModelConfig, ModelKind, Preset};
use crate::sim::SimConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnrollConfig {
    pub dimension: usize,
    /// Seed of the embedding projection. Training and evaluation must share it.
    pub seed: u64,
}

impl Default for EnrollConfig {
    fn default() -> Self {
        Self { dimension: DVECTOR_DIM, seed: 11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seed of the simulated corpus.
    pub seed: u64,
    pub sim: SimConfig,
    pub enroll: EnrollConfig,
    pub train: TrainConfig,
    pub eval: MetricParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::for_preset(Preset::Small)
    }
}

impl PipelineConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let mut train = TrainConfig::default();
        train.model = ModelConfig::preset(train.model.kind(), preset);
        Self { seed: 0, sim: SimConfig::default(), enroll: EnrollConfig::default(), train, eval: MetricParams::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.train.validate()?;
        if self.enroll.dimension == 0 {
            return Err(PseError::Config("enroll.dimension must be positive".into()));
        }
        if !(self.eval.gamma > 0.0) || !(self.eval.p > 0.0) {
            return Err(PseError::Config("eval.gamma and eval.p must be positive".into()));
        }
        Ok(())
    }

    /// Resolves defaults for `preset`, the optional file, then overrides.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut layers = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| PseError::Config(format!("cannot read {}: {e}", path.display())))?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| PseError::Config(format!("{}: {e}", path.display())))?;
            if !value.is_object() {
                return Err(PseError::Config(format!("{}: expected a JSON object", path.display())));
            }
            layers.push(value);
        }
        layers.push(overrides_to_value(overrides)?);

        let mut base = serde_json::to_value(Self::for_preset(preset))?;
        // a different model kind starts from that kind's preset
        let kind = layers.iter().rev().find_map(|l| l.pointer("/train/model/kind").cloned());
        if let Some(kind) = kind {
            let kind: ModelKind =
                serde_json::from_value(kind).map_err(|e| PseError::Config(format!("train.model.kind: {e}")))?;
            base["train"]["model"] = serde_json::to_value(ModelConfig::preset(kind, preset))?;
        }
        for layer in layers {
            merge(&mut base, layer, "")?;
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| PseError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `a.b.c=value` items into a nested object. Values are read as JSON
/// and fall back to plain strings.
pub fn overrides_to_value(overrides: &[String]) -> Result<Value> {
    let mut root = Value::Object(Map::new());
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| PseError::Config(format!("override `{item}` is not key=value")))?;
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(PseError::Config(format!("bad override key `{key}`")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            let obj = node.as_object_mut().ok_or_else(|| PseError::Config(format!("override `{key}` conflicts with another")))?;
            node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        }
        node.as_object_mut()
            .ok_or_else(|| PseError::Config(format!("override `{key}` conflicts with another")))?
            .insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(root)
}

/// Merges `layer` into `base`. Objects merge key by key; a tagged object
/// whose `kind` changes is replaced whole; anything else is replaced.
pub fn merge(base: &mut Value, layer: Value, path: &str) -> Result<()> {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            let retag = matches!((b.get("kind"), l.get("kind")), (Some(x), Some(y)) if x != y);
            if retag {
                *b = l;
                return Ok(());
            }
            for (k, v) in l {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &p)?,
                    None => return Err(PseError::Config(format!("unknown key `{p}`"))),
                }
            }
        }
        (b, l) => *b = l,
    }
    Ok(())
}
