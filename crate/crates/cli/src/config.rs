//! Config loading: a JSON file layered over built-in defaults, then dotted
//! `key=value` overrides. Unknown keys are rejected with the nearest valid
//! names.

use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Up to three names from `candidates` closest to `key`.
pub fn nearest_keys<'a>(key: &str, candidates: impl IntoIterator<Item = &'a String>) -> Vec<String> {
    let mut scored: Vec<(f64, &String)> = candidates
        .into_iter()
        .map(|c| (strsim::jaro_winkler(key, c), c))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().take(3).map(|(_, c)| c.clone()).collect()
}

fn unknown_key(path: &str, key: &str, siblings: &Map<String, Value>) -> ConfigError {
    let full = if path.is_empty() { key.to_string() } else { format!("{path}.{key}") };
    let near = nearest_keys(key, siblings.keys());
    if near.is_empty() {
        ConfigError(format!("unknown key `{full}`"))
    } else {
        ConfigError(format!("unknown key `{full}`; nearest valid keys: {}", near.join(", ")))
    }
}

/// Fails on the first key of `given` that does not appear in `known`.
fn check_known(given: &Value, known: &Value, path: &str) -> Result<(), ConfigError> {
    let (Value::Object(given), Value::Object(known)) = (given, known) else {
        return Ok(());
    };
    for (key, value) in given {
        match known.get(key) {
            None => return Err(unknown_key(path, key, known)),
            Some(inner) => {
                let child = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                check_known(value, inner, &child)?;
            }
        }
    }
    Ok(())
}

/// Parses an override value as JSON, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dot separated) in `root`; every segment must already exist.
pub fn apply_override(root: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    let mut cursor = root;
    let mut walked = String::new();
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(ConfigError(format!("malformed key `{path}`")));
    }
    for (i, segment) in segments.iter().enumerate() {
        let Value::Object(map) = cursor else {
            return Err(ConfigError(format!("`{walked}` is not an object, so `{path}` cannot be set")));
        };
        if !map.contains_key(*segment) {
            return Err(unknown_key(&walked, segment, map));
        }
        if i + 1 == segments.len() {
            map.insert(segment.to_string(), value);
            return Ok(());
        }
        if !walked.is_empty() {
            walked.push('.');
        }
        walked.push_str(segment);
        cursor = map.get_mut(*segment).expect("checked above");
    }
    unreachable!("path has at least one segment")
}

fn to_value<T: Serialize>(config: &T) -> Value {
    serde_json::to_value(config).expect("configs serialize to JSON")
}

fn from_value<T: DeserializeOwned>(value: Value) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            ConfigError(format!("invalid config: {}", e.inner()))
        } else {
            ConfigError(format!("invalid config at `{path}`: {}", e.inner()))
        }
    })
}

/// Builds a config from defaults, an optional JSON text and `key=value` overrides.
pub fn resolve<T>(file_text: Option<&str>, overrides: &[String]) -> Result<T, ConfigError>
where
    T: Serialize + DeserializeOwned + Default,
{
    let base: T = match file_text {
        None => T::default(),
        Some(text) => {
            let given: Value =
                serde_json::from_str(text).map_err(|e| ConfigError(format!("config is not valid JSON: {e}")))?;
            let parsed: T = from_value(given.clone())?;
            check_known(&given, &to_value(&parsed), "")?;
            parsed
        }
    };
    if overrides.is_empty() {
        return Ok(base);
    }
    let mut value = to_value(&base);
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("override `{item}` must look like key=value")))?;
        apply_override(&mut value, key.trim(), parse_value(raw))?;
    }
    let parsed: T = from_value(value.clone())?;
    check_known(&value, &to_value(&parsed), "")?;
    Ok(parsed)
}

pub fn load<T>(path: Option<&Path>, overrides: &[String]) -> Result<T, ConfigError>
where
    T: Serialize + DeserializeOwned + Default,
{
    let text = match path {
        None => None,
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| ConfigError(format!("cannot read {}: {e}", p.display())))?,
        ),
    };
    resolve(text.as_deref(), overrides)
}
