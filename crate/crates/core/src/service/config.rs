use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::flowgraph::DEFAULT_THRESHOLD;

pub const DEFAULT_CACHE_CAPACITY: usize = 16;

const KNOWN_FIELDS: &[&str] = &[
    "max_user_string_length",
    "preloaded_dataset_filename",
    "debug",
    "models",
    "default_model",
    "default_threshold",
    "cache_capacity",
];

#[derive(Deserialize)]
struct RawConfig {
    max_user_string_length: usize,
    #[serde(default)]
    preloaded_dataset_filename: Option<PathBuf>,
    #[serde(default)]
    debug: bool,
    models: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    default_model: Option<String>,
    #[serde(default = "default_threshold")]
    default_threshold: f64,
    #[serde(default = "default_capacity")]
    cache_capacity: usize,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_capacity() -> usize {
    DEFAULT_CACHE_CAPACITY
}

/// Deployment configuration, read from a JSON document.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub max_user_string_length: usize,
    pub preloaded_dataset_filename: Option<PathBuf>,
    pub debug: bool,
    /// Display name → hub identifier or local path, in document order.
    pub models: Vec<(String, String)>,
    pub default_model: String,
    pub default_threshold: f64,
    pub cache_capacity: usize,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    /// Prompts from the preloaded dataset, one per line.
    pub dataset: Vec<String>,
}

impl ServiceConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &base)
    }

    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("not valid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("configuration must be a JSON object".into()))?;
        let debug = obj.get("debug").and_then(|v| v.as_bool()).unwrap_or(false);
        if !debug {
            if let Some(unknown) = obj.keys().find(|k| !KNOWN_FIELDS.contains(&k.as_str())) {
                return Err(Error::Config(format!("unknown field `{unknown}`")));
            }
        }
        let raw: RawConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;

        if raw.max_user_string_length == 0 {
            return Err(Error::Config("max_user_string_length must be at least 1".into()));
        }
        if raw.models.is_empty() {
            return Err(Error::Config("no models configured".into()));
        }
        if !(0.0..=1.0).contains(&raw.default_threshold) {
            return Err(Error::Config(format!(
                "default_threshold {} is outside [0, 1]",
                raw.default_threshold
            )));
        }
        if raw.cache_capacity == 0 {
            return Err(Error::Config("cache_capacity must be at least 1".into()));
        }
        let models = raw
            .models
            .into_iter()
            .map(|(name, v)| match v {
                serde_json::Value::String(s) => Ok((name, s)),
                other => Err(Error::Config(format!(
                    "model `{name}` must map to a string, got {other}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        let default_model = match raw.default_model {
            Some(name) if models.iter().any(|(n, _)| *n == name) => name,
            Some(name) => return Err(Error::Config(format!("default model `{name}` is not configured"))),
            None => models[0].0.clone(),
        };
        let dataset = match &raw.preloaded_dataset_filename {
            Some(file) => {
                let path = base_dir.join(file);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("dataset {}: {e}", path.display())))?;
                text.lines()
                    .map(str::trim_end)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect()
            }
            None => Vec::new(),
        };
        Ok(Self {
            max_user_string_length: raw.max_user_string_length,
            preloaded_dataset_filename: raw.preloaded_dataset_filename,
            debug: raw.debug,
            models,
            default_model,
            default_threshold: raw.default_threshold,
            cache_capacity: raw.cache_capacity,
            base_dir: base_dir.to_path_buf(),
            dataset,
        })
    }

    pub fn model_reference(&self, name: &str) -> Option<&str> {
        self.models.iter().find(|(n, _)| n == name).map(|(_, r)| r.as_str())
    }
}
