//! Run configuration file: `[model]`, `[train]` and `[data]` tables in TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

const MODEL_KEYS: &[&str] = &[
    "depth",
    "hidden",
    "heads",
    "seq_len",
    "vocab",
    "moe_placement",
    "num_experts",
    "top_k",
    "gate",
    "slice_offset",
    "ffn_ratio",
];
const TRAIN_KEYS: &[&str] = &[
    "steps",
    "batch_size",
    "learning_rate",
    "warmup_steps",
    "weight_decay",
    "balance_weight",
    "seed",
    "eval_every",
    "eval_batches",
];
const DATA_KEYS: &[&str] = &["corpus"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Parses and validates. Unknown keys are errors naming the key.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("config", e.message()))?;
        for (section, value) in &table {
            let known = match section.as_str() {
                "model" => MODEL_KEYS,
                "train" => TRAIN_KEYS,
                "data" => DATA_KEYS,
                _ => return Err(Error::config(section.clone(), "unknown section")),
            };
            let inner = value
                .as_table()
                .ok_or_else(|| Error::config(section.clone(), "expected a table"))?;
            for key in inner.keys() {
                if !known.contains(&key.as_str()) {
                    return Err(Error::config(format!("{section}.{key}"), "unknown key"));
                }
            }
        }
        let section = |name: &str| table.get(name).cloned().unwrap_or_else(|| toml::Table::new().into());
        let model: ModelConfig = section("model")
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("model", e.message()))?;
        let train: TrainConfig = section("train")
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("train", e.message()))?;
        if !table.contains_key("data") {
            return Err(Error::config("data.corpus", "missing"));
        }
        let data: DataConfig = section("data")
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("data.corpus", e.message()))?;
        let cfg = RunConfig { model, train, data };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if cfg.data.corpus.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.corpus = dir.join(&cfg.data.corpus);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// The configuration with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
