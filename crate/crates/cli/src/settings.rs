//! Run configuration as a flat map of dotted keys.
//!
//! Defaults come from the typed configs, a JSON file may override any key,
//! and command-line flags override both. The merged map is turned back into
//! the typed configs, so a misspelled key is reported instead of ignored.

use std::collections::BTreeMap;
use std::path::Path;

use latgeo_core::model::ModelConfig;
use latgeo_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Words seen at most this often become UNK.
    pub min_count: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { min_count: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Beam width for captioning and final evaluation; 1 is greedy.
    pub beam: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub decode: DecodeConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    map: BTreeMap<String, Value>,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(obj) if !obj.is_empty() => {
            for (k, child) in obj {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(map: &BTreeMap<String, Value>) -> CliResult<Value> {
    let mut root = Map::new();
    for (key, value) in map {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            let entry = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| CliError::Input(format!("config key `{key}` nests under a plain value")))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), value.clone());
    }
    Ok(Value::Object(root))
}

/// Parses a flag value as JSON, falling back to a plain string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl Default for Settings {
    fn default() -> Self {
        let mut map = BTreeMap::new();
        let v = serde_json::to_value(RunConfig::default()).expect("config serializes");
        flatten("", &v, &mut map);
        Self { map }
    }
}

impl Settings {
    pub fn flat(&self) -> &BTreeMap<String, Value> {
        &self.map
    }

    /// Sets one dotted key, replacing anything nested under it or above it.
    pub fn set(&mut self, key: &str, value: Value) -> CliResult<()> {
        let section = key.split('.').next().unwrap_or("");
        if !matches!(section, "model" | "train" | "data" | "decode") || !key.contains('.') {
            return Err(CliError::Input(format!("unknown config key `{key}`")));
        }
        let nested = format!("{key}.");
        self.map.retain(|k, _| !k.starts_with(&nested) && !key.starts_with(&format!("{k}.")));
        self.map.insert(key.to_string(), value);
        Ok(())
    }

    /// Applies a `key=value` assignment from the command line.
    pub fn assign(&mut self, pair: &str) -> CliResult<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("expected KEY=VALUE, got `{pair}`")))?;
        self.set(k.trim(), parse_value(v.trim()))
    }

    pub fn merge_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let Value::Object(obj) = v else {
            return Err(CliError::Input(format!("{}: expected a JSON object", path.display())));
        };
        for (k, v) in obj {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn resolve(&self) -> CliResult<RunConfig> {
        let v = unflatten(&self.map)?;
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| CliError::Input(format!("config: {e}")))?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        assert_eq!(Settings::default().resolve().unwrap(), RunConfig::default());
    }

    #[test]
    fn later_assignments_win() {
        let mut s = Settings::default();
        s.assign("train.max_epochs=7").unwrap();
        s.assign("train.max_epochs=9").unwrap();
        s.assign("model.connectivity=single").unwrap();
        let cfg = s.resolve().unwrap();
        assert_eq!(cfg.train.max_epochs, 9);
        assert_eq!(cfg.model.connectivity.name(), "single");
    }

    #[test]
    fn nested_enum_keys_replace_each_other() {
        let mut s = Settings::default();
        s.assign("train.rollout.kind=sample").unwrap();
        s.assign("train.rollout.temperature=0.5").unwrap();
        let cfg = s.resolve().unwrap();
        assert_eq!(
            cfg.train.rollout,
            latgeo_core::training::Rollout::Sample { temperature: 0.5 }
        );
    }

    #[test]
    fn misspelled_keys_are_rejected() {
        let mut s = Settings::default();
        assert!(s.assign("trian.seed=1").is_err());
        s.assign("train.sede=1").unwrap();
        assert!(s.resolve().is_err());
    }
}
