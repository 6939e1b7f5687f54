use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{DataOptions, SyntheticConfig, ValidationSplit};
use crate::encoders::{ModelConfig, TopWeighting};
use crate::error::{Error, Result};
use crate::training::TrainConfig;

/// Environment variable holding the root for relative `data_dir` values.
pub const DATA_ROOT_ENV: &str = "UNIREC_DATA_ROOT";

/// Keys that shape the prepared dataset and may not change afterwards.
pub const DATA_KEYS: &[&str] = &[
    "data_dir",
    "test_dir",
    "title_len",
    "min_count",
    "valid_fraction",
    "valid_split",
    "synth_seed",
    "synth_topics",
    "synth_users",
    "synth_news",
    "synth_words_per_topic",
    "synth_niches_per_topic",
    "synth_impressions_per_user",
    "synth_preferred_click_prob",
    "synth_niche_prob",
    "synth_hard_negative_prob",
];

/// Everything a run needs, as flat `key = value` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// MIND-layout training directory; empty selects the synthetic generator.
    pub data_dir: String,
    /// MIND-layout test directory; empty reuses `data_dir`.
    pub test_dir: String,
    pub title_len: usize,
    pub min_count: usize,
    pub valid_fraction: f64,
    /// `time` or `user`.
    pub valid_split: String,

    pub synth_seed: u64,
    pub synth_topics: usize,
    pub synth_users: usize,
    pub synth_news: usize,
    pub synth_words_per_topic: usize,
    pub synth_niches_per_topic: usize,
    pub synth_impressions_per_user: usize,
    pub synth_preferred_click_prob: f64,
    pub synth_niche_prob: f64,
    pub synth_hard_negative_prob: f64,

    pub dim: usize,
    pub heads: usize,
    pub pool_dim: usize,
    pub history_len: usize,
    pub position_embeddings: bool,
    pub user_residual: bool,
    pub layer_norm: bool,
    pub dropout: f64,

    pub k: usize,
    pub t: usize,
    pub m: usize,
    pub p: usize,
    pub learning_rate: f64,
    pub recall_learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub max_samples: usize,
    pub recall_max_samples: usize,
    pub workers: usize,
    pub unfreeze_user: bool,
    /// `probabilities` or `logits`.
    pub top_weighting: String,
    pub valid_recall_k: usize,

    pub seed: u64,
    pub run_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataOptions::default();
        let synth = SyntheticConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            data_dir: String::new(),
            test_dir: String::new(),
            title_len: data.title_len,
            min_count: data.min_count,
            valid_fraction: data.valid_fraction,
            valid_split: "time".into(),
            synth_seed: synth.seed,
            synth_topics: synth.num_topics,
            synth_users: synth.num_users,
            synth_news: synth.num_news,
            synth_words_per_topic: synth.words_per_topic,
            synth_niches_per_topic: synth.niches_per_topic,
            synth_impressions_per_user: synth.impressions_per_user,
            synth_preferred_click_prob: synth.preferred_click_prob,
            synth_niche_prob: synth.niche_prob,
            synth_hard_negative_prob: synth.hard_negative_prob,
            dim: model.dim,
            heads: model.heads,
            pool_dim: model.pool_dim,
            history_len: model.history_len,
            position_embeddings: model.position_embeddings,
            user_residual: model.user_residual,
            layer_norm: model.layer_norm,
            dropout: model.dropout,
            k: train.k,
            t: train.t,
            m: train.m,
            p: train.p,
            learning_rate: train.learning_rate,
            recall_learning_rate: train.recall_learning_rate,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            max_samples: train.max_samples,
            recall_max_samples: train.recall_max_samples,
            workers: train.workers,
            unfreeze_user: train.unfreeze_user,
            top_weighting: "probabilities".into(),
            valid_recall_k: train.valid_recall_k,
            seed: train.seed,
            run_dir: "runs/default".into(),
        }
    }
}

fn to_map(cfg: &RunConfig) -> Map<String, Value> {
    match serde_json::to_value(cfg).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("RunConfig serializes to an object"),
    }
}

fn parse_value(key: &str, raw: &str, like: &Value) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("`{key}` expects {what}, got `{raw}`"));
    Ok(match like {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| bad("a finite number"))?
        }
        _ => Value::String(raw.to_string()),
    })
}

impl RunConfig {
    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Sets one key; unknown keys and ill-typed values are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut map = to_map(self);
        let like = map
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        let v = parse_value(key, value, like)?;
        map.insert(key.to_string(), v);
        *self = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    /// Parses a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// One `key = value` line per field, in key order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in to_map(self) {
            let v = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// The data-shaping keys and their values.
    pub fn data_part(&self) -> Vec<(String, Value)> {
        let map = to_map(self);
        DATA_KEYS
            .iter()
            .map(|k| (k.to_string(), map[*k].clone()))
            .collect()
    }

    pub fn is_synthetic(&self) -> bool {
        self.data_dir.is_empty()
    }

    /// Resolves a relative data path against `root` when given.
    pub fn resolve(path: &str, root: Option<&Path>) -> PathBuf {
        let p = PathBuf::from(path);
        match root {
            Some(r) if p.is_relative() => r.join(p),
            _ => p,
        }
    }

    /// Training and test directories, relative ones under `root`.
    pub fn data_dirs(&self, root: Option<&Path>) -> (PathBuf, PathBuf) {
        let train = Self::resolve(&self.data_dir, root);
        let test = if self.test_dir.is_empty() {
            train.clone()
        } else {
            Self::resolve(&self.test_dir, root)
        };
        (train, test)
    }

    pub fn dataset_name(&self) -> String {
        if self.is_synthetic() {
            format!("synthetic(seed={})", self.synth_seed)
        } else {
            self.data_dir.clone()
        }
    }

    pub fn data_options(&self) -> Result<DataOptions> {
        Ok(DataOptions {
            title_len: self.title_len,
            min_count: self.min_count,
            valid_fraction: self.valid_fraction,
            valid_split: self.valid_split.parse::<ValidationSplit>()?,
        })
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.synth_seed,
            num_topics: self.synth_topics,
            num_users: self.synth_users,
            num_news: self.synth_news,
            words_per_topic: self.synth_words_per_topic,
            niches_per_topic: self.synth_niches_per_topic,
            impressions_per_user: self.synth_impressions_per_user,
            preferred_click_prob: self.synth_preferred_click_prob,
            niche_prob: self.synth_niche_prob,
            hard_negative_prob: self.synth_hard_negative_prob,
            ..SyntheticConfig::default()
        }
    }

    /// Model settings; vocabulary size and title length come from the data.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            pool_dim: self.pool_dim,
            history_len: self.history_len,
            position_embeddings: self.position_embeddings,
            user_residual: self.user_residual,
            layer_norm: self.layer_norm,
            dropout: self.dropout,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            k: self.k,
            t: self.t,
            m: self.m,
            p: self.p,
            learning_rate: self.learning_rate,
            recall_learning_rate: self.recall_learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            max_samples: self.max_samples,
            recall_max_samples: self.recall_max_samples,
            workers: self.workers,
            unfreeze_user: self.unfreeze_user,
            top_weighting: self.top_weighting.parse::<TopWeighting>()?,
            valid_recall_k: self.valid_recall_k,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every derived configuration.
    pub fn validate(&self) -> Result<()> {
        self.data_options()?;
        self.train_config()?;
        let mut model = self.model_config();
        model.vocab_size = 2;
        model.title_len = self.title_len.max(1);
        model.validate()
    }
}
