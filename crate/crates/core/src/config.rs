//! Run configuration: one JSON document with `model`, `train` and `data` sections.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bpe::WordMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    /// Vocabulary files; built from the training data and written to `output_dir` when absent.
    pub src_vocab: Option<PathBuf>,
    pub tgt_vocab: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub src_mode: WordMode,
    pub tgt_mode: WordMode,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        RunConfig::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.grams()?;
        cfg.model.head_dim()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Single-line JSON, as echoed into checkpoint manifests.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Sets `dotted.key` in `doc` to `raw` parsed as JSON, or as a plain string when that fails.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("override key `{key}` has an empty segment")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one segment")
}

/// Reads `path` (or starts from defaults), applies `--set` overrides and validates.
pub fn load_config_with(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    RunConfig::from_value(doc).map_err(|e| match (path, e) {
        (Some(p), Error::Config(m)) => Error::Config(format!("{}: {m}", p.display())),
        (_, e) => e,
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    load_config_with(Some(path), &[])
}
