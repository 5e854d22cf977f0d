//! Layered settings: preset, then config file, then `MVAS_SEED`, then flags.
//!
//! Files are either JSON objects or `key=value` lines with dotted keys
//! (`train.lr=0.002`, `model.stages.0.a=4`). Nested JSON is flattened to the
//! same dotted keys, so both forms address the same settings.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mvad::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub const SEED_ENV: &str = "MVAS_SEED";

/// Dotted `(key, raw value)` pairs in file order.
pub type Settings = Vec<(String, String)>;

pub fn read_settings(path: &Path) -> Result<Settings> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_settings(&text).with_context(|| format!("config file {}", path.display()))
}

pub fn parse_settings(text: &str) -> Result<Settings> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let v: Value = serde_json::from_str(trimmed).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let mut out = Vec::new();
        flatten("", &v, &mut out);
        return Ok(out);
    }
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn flatten(prefix: &str, v: &Value, out: &mut Settings) {
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                flatten(&join(k), child, out);
            }
        }
        Value::Array(items) if items.iter().any(|i| i.is_object() || i.is_array()) => {
            for (i, child) in items.iter().enumerate() {
                flatten(&join(&i.to_string()), child, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Parses `KEY=VALUE` from the command line.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

/// A raw value interpreted against the type of the node it replaces.
fn coerce(raw: &str, current: &Value) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        if !(current.is_array() && !v.is_array()) {
            return v;
        }
    }
    if current.is_array() {
        return Value::Array(raw.split(',').map(|p| coerce(p.trim(), &Value::Null)).collect());
    }
    Value::String(raw.to_string())
}

/// Applies dotted settings onto a serializable value; unknown keys are errors.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, settings: &[(String, String)]) -> Result<T> {
    let mut root = serde_json::to_value(base).expect("settings target serializes");
    for (key, raw) in settings {
        let mut node = &mut root;
        for part in key.split('.') {
            node = match node {
                Value::Object(m) => m.get_mut(part),
                Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| Error::Config(format!("unknown setting {key:?}")))?;
        }
        *node = coerce(raw, node);
    }
    serde_json::from_value(root).map_err(|e| Error::Config(format!("invalid settings: {e}")).into())
}

/// The seed from `MVAS_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => Ok(Some(
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
        )),
        Err(_) => Ok(None),
    }
}

/// Settings that name paths rather than run parameters.
#[derive(Debug, Default, Clone)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Splits path keys and `preset` out of file settings.
pub fn split_settings(settings: Settings) -> (Option<String>, Paths, Settings) {
    let mut preset = None;
    let mut paths = Paths::default();
    let mut rest = Vec::new();
    for (k, v) in settings {
        match k.as_str() {
            "preset" => preset = Some(v),
            "dataset" => paths.dataset = Some(v.into()),
            "out" => paths.out = Some(v.into()),
            _ => rest.push((k, v)),
        }
    }
    (preset, paths, rest)
}
