//! Config files layered over built-in defaults.
//!
//! A config file (TOML, or JSON when the extension is `.json`) holds a
//! partial tree. It is merged key by key into the serialized defaults and
//! the result is deserialized, so every error carries the dotted path of
//! the offending field.

use std::path::Path;

use pscbm::intervention::StrategyKind;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// A config value that does not fit its schema.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid configuration: {field}: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Reads `path` into a JSON tree.
pub fn read_tree(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let tree = if is_json {
        serde_json::from_str(&text).map_err(|e| ConfigError::new(path.display().to_string(), e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| ConfigError::new(path.display().to_string(), e.to_string()))?
    };
    Ok(tree)
}

/// `defaults`, then the optional file at `path`, then `key=value` pairs
/// with dotted keys.
pub fn load<T: Serialize + DeserializeOwned>(defaults: &T, path: Option<&Path>, sets: &[String]) -> anyhow::Result<T> {
    let file = match path {
        Some(p) => read_tree(p)?,
        None => Value::Object(Map::new()),
    };
    let cfg = layer(defaults, file)?;
    if sets.is_empty() {
        return Ok(cfg);
    }
    let pairs = sets.iter().map(|s| parse_set(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(layer(&cfg, dotted(&pairs))?)
}

/// `a.b=0.5` into a key and a TOML-typed value; bare words become strings.
pub fn parse_set(s: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::new(s, "expected KEY=VALUE"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::new(s, "empty key"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Map<String, Value>>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut m| m.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Merges `overrides` into the serialized `defaults` and deserializes.
pub fn layer<T: Serialize + DeserializeOwned>(defaults: &T, overrides: Value) -> Result<T, ConfigError> {
    let mut tree = serde_json::to_value(defaults).expect("config types serialize");
    merge(&mut tree, overrides, "")?;
    serde_path_to_error::deserialize(tree).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::new(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
    })
}

fn merge(base: &mut Value, over: Value, path: &str) -> Result<(), ConfigError> {
    match (base, over) {
        // tagged enums are replaced whole; their fields depend on the tag
        (Value::Object(b), Value::Object(o)) if !b.contains_key("kind") => {
            for (k, v) in o {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(ConfigError::new(sub, "unknown field")),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// A strategy given by name (`"hard"`) or as a tagged object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StrategySpec {
    Name(String),
    Full(StrategyKind),
}

impl StrategySpec {
    pub fn resolve(&self) -> Result<StrategyKind, ConfigError> {
        let kind = match self {
            StrategySpec::Name(n) => StrategyKind::parse(n)
                .ok_or_else(|| ConfigError::new("strategy", format!("unknown strategy {n:?}")))?,
            StrategySpec::Full(k) => *k,
        };
        kind.validate()
            .map_err(|e| ConfigError::new("strategy", e.to_string()))?;
        Ok(kind)
    }
}

impl From<StrategyKind> for StrategySpec {
    fn from(k: StrategyKind) -> Self {
        StrategySpec::Full(k)
    }
}

/// Parses `a,b,c` into trimmed, non-empty items.
pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

/// Expands a map of `key -> value` pairs into a nested tree, splitting keys
/// on dots. Used for `--set a.b=1` style overrides.
pub fn dotted(pairs: &[(String, Value)]) -> Value {
    let mut root = Map::new();
    for (key, v) in pairs {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("intermediate keys are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}
