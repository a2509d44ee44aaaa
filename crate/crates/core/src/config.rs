//! Run configuration: defaults, then a JSON file, then `key=value` flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {origin}: {message}")]
    ParseError { origin: String, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("ambiguous config key `{0}`; qualify it as model.{0} or train.{0}")]
    AmbiguousKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(ConfigError::Invalid)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// Recursively overlays `patch` on `base`, rejecting keys `base` lacks.
fn overlay(base: &mut Map<String, Value>, patch: Map<String, Value>, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in patch {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (None, _) => return Err(ConfigError::UnknownKey(path)),
            (Some(Value::Object(inner)), Value::Object(p)) => overlay(inner, p, &path)?,
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

/// Splits `key=value`. Bare keys are looked up in both sections; the value is
/// read as JSON when it parses and as a string otherwise.
fn apply_override(base: &mut Map<String, Value>, raw: &str) -> Result<(), ConfigError> {
    let (key, value) = raw.split_once('=').ok_or_else(|| ConfigError::ParseError {
        origin: "--set".into(),
        message: format!("expected key=value, got `{raw}`"),
    })?;
    let key = key.trim();
    let value = serde_json::from_str(value.trim()).unwrap_or_else(|_| Value::String(value.trim().to_string()));
    let path = match key.split_once('.') {
        Some(_) => key.to_string(),
        None => {
            let hits: Vec<&str> = ["model", "train"]
                .into_iter()
                .filter(|s| base[*s].as_object().is_some_and(|m| m.contains_key(key)))
                .collect();
            match hits.as_slice() {
                [] => return Err(ConfigError::UnknownKey(key.to_string())),
                [section] => format!("{section}.{key}"),
                _ => return Err(ConfigError::AmbiguousKey(key.to_string())),
            }
        }
    };
    let mut patch = value;
    for part in path.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_string(), patch);
        patch = Value::Object(m);
    }
    let Value::Object(patch) = patch else { unreachable!() };
    overlay(base, patch, "")
}

/// Reads and merges the configuration. A missing `path` or an empty file
/// yields the defaults.
pub fn load_config<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?,
        None => String::new(),
    };
    let origin = path.map_or_else(|| "<none>".to_string(), |p| p.display().to_string());
    merge_config(&text, &origin, overrides)
}

pub fn merge_config<S: AsRef<str>>(text: &str, origin: &str, overrides: &[S]) -> Result<RunConfig, ConfigError> {
    let Value::Object(mut base) = serde_json::to_value(RunConfig::default()).expect("defaults serialise") else {
        unreachable!()
    };
    if !text.trim().is_empty() {
        let parsed: Value = serde_json::from_str(text)
            .map_err(|e| ConfigError::ParseError { origin: origin.to_string(), message: e.to_string() })?;
        let Value::Object(file) = parsed else {
            return Err(ConfigError::ParseError { origin: origin.to_string(), message: "top level must be an object".into() });
        };
        overlay(&mut base, file, "")?;
    }
    for o in overrides {
        apply_override(&mut base, o.as_ref())?;
    }
    let cfg: RunConfig = serde_json::from_value(Value::Object(base))
        .map_err(|e| ConfigError::ParseError { origin: origin.to_string(), message: e.to_string() })?;
    cfg.validate()?;
    Ok(cfg)
}
