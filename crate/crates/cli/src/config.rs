//! The single JSON configuration file shared by every subcommand.
//!
//! Loading starts from the built-in defaults, merges the file on top and then
//! applies `--set section.key=value` overrides. Keys that do not exist in the
//! defaults are rejected with their full dotted path.

use std::fs;
use std::path::Path;

use gasformer::dataset::SynthConfig;
use gasformer::labeler::LabelerConfig;
use gasformer::training::TrainConfig;
use gasformer::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub labeler: LabelerConfig,
    pub synth: SynthConfig,
}

impl AppConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(Self::default()).expect("defaults serialize");
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::data(format!("{}: invalid JSON: {e}", path.display())))?;
            merge(&mut value, file, "")?;
        }
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| CliError::data(format!("config: {e}")))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.labeler.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn unknown(path: &str) -> CliError {
    CliError::data(format!("unknown config key `{path}`"))
}

/// Overlays `src` onto `dst`. Objects merge key by key; any other value
/// replaces the default outright, including `null` defaults.
fn merge(dst: &mut Value, src: Value, prefix: &str) -> Result<(), CliError> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let path = join(prefix, &k);
                let slot = d.get_mut(&k).ok_or_else(|| unknown(&path))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Applies one `dotted.path=value` override. The value is parsed as JSON
/// when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, item: &str) -> Result<(), CliError> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::data(format!("override `{item}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let mut walked = String::new();
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        walked = join(&walked, key);
        let map: &mut Map<String, Value> = match node {
            Value::Object(m) => m,
            Value::Null => return Err(CliError::data(format!("cannot set `{path}`: `{}` is unset", parent(&walked)))),
            _ => return Err(unknown(&walked)),
        };
        let slot = map.get_mut(*key).ok_or_else(|| unknown(&walked))?;
        if i + 1 == keys.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(CliError::data("empty override key"))
}

fn parent(path: &str) -> &str {
    path.rsplit_once('.').map_or("", |(p, _)| p)
}
