//! Layered run configuration: built-in defaults, then an optional JSON file,
//! then `--set key.path=value` overrides, then the mandatory `--seed`.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::training::ExperimentConfig;

/// Recursively merges `patch` into `base`; objects merge key by key, anything
/// else replaces.
pub fn deep_merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `a.b.c=value`. The value is read as JSON when it parses, otherwise
/// as a bare string.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_owned).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{text}` has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((path, value))
}

pub fn apply_override(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut patch = value;
    for key in path.iter().rev() {
        let mut m = Map::new();
        m.insert(key.clone(), patch);
        patch = Value::Object(m);
    }
    if !root.is_object() {
        return Err(Error::Config("config root must be a JSON object".into()));
    }
    deep_merge(root, patch);
    Ok(())
}

/// Builds and validates the experiment config. Unknown keys anywhere are
/// rejected.
pub fn load_config(file: Option<&Path>, overrides: &[String], seed: u64) -> Result<ExperimentConfig> {
    let mut root = serde_json::to_value(ExperimentConfig::with_seed(seed))
        .map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(Error::Config(format!("{}: top level must be an object", path.display())));
        }
        deep_merge(&mut root, patch);
    }
    for o in overrides {
        let (path, value) = parse_override(o)?;
        apply_override(&mut root, &path, value)?;
    }
    apply_override(&mut root, &["seed".to_owned()], Value::from(seed))?;
    let cfg: ExperimentConfig =
        serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
