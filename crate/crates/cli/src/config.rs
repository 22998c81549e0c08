//! Flat `key = value` run configuration.
//!
//! Keys are namespaced under `model.`, `train.`, `sparse.`, `prune.` and
//! `data.`. `#` starts a comment. Unset keys keep their defaults; the
//! resolved configuration can be rendered back to text and re-parsed to the
//! same value.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use spvt::data::{DataSource, DatasetSpec};
use spvt::sparse::default_lambda;
use spvt::train::TrainConfig;
use spvt::vit::ParamGroup;
use spvt::{SparseConfig, SparsePosition, ViTConfig};
use thiserror::Error;

pub const DEFAULT_RATIOS: [f64; 5] = [0.10, 0.15, 0.20, 0.25, 0.30];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("config key `{key}` is set twice")]
    Duplicate { key: String },
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config file {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSettings {
    /// Ratio for `prune` when `--ratio` is not given.
    pub ratio: Option<f64>,
    /// Ratios visited by `sweep`.
    pub ratios: Vec<f64>,
    pub exclude: Vec<ParamGroup>,
}

impl Default for PruneSettings {
    fn default() -> Self {
        Self { ratio: None, ratios: DEFAULT_RATIOS.to_vec(), exclude: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub prune: PruneSettings,
    /// Write wall-clock seconds into `metrics.csv` (otherwise 0, which keeps
    /// the file reproducible bit for bit).
    pub record_time: bool,
    /// `sparse.lambda` as given; `None` until resolved to `1 / n_feature`.
    lambda: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ViTConfig::toy();
        let data = DatasetSpec::synthetic(model.num_classes, 320, 100, 0.05, 0);
        Self {
            model,
            train: TrainConfig::default(),
            data,
            prune: PruneSettings::default(),
            record_time: false,
            lambda: None,
        }
    }
}

const KEYS: &[&str] = &[
    "model.preset",
    "model.image_size",
    "model.patch_size",
    "model.channels",
    "model.hidden_size",
    "model.mlp_size",
    "model.num_heads",
    "model.depth",
    "model.num_classes",
    "model.layer_norm_eps",
    "train.batch_size",
    "train.learning_rate",
    "train.epochs",
    "train.weight_decay",
    "train.momentum",
    "train.seed",
    "train.stop_at_train_acc",
    "train.record_time",
    "sparse.enabled",
    "sparse.position",
    "sparse.lambda",
    "prune.ratio",
    "prune.ratios",
    "prune.exclude",
    "data.source",
    "data.path",
    "data.noise",
    "data.train_size",
    "data.test_size",
    "data.seed",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_list<T>(key: &str, value: &str, item: impl Fn(&str) -> Result<T, ConfigError>) -> Result<Vec<T>, ConfigError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(item)
        .collect::<Result<_, _>>()
        .map_err(|e| match e {
            ConfigError::BadValue { reason, .. } => ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                reason,
            },
            other => other,
        })
}

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: reason.into() }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    /// Parses config text. `model.preset` and then `data.source` are
    /// applied before every other key regardless of where they appear.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.trim().to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { key: key.to_string() });
            }
            if pairs.iter().any(|(k, _)| k == key) {
                return Err(ConfigError::Duplicate { key: key.to_string() });
            }
            pairs.push((key.to_string(), value.to_string()));
        }
        pairs.sort_by_key(|(k, _)| match k.as_str() {
            "model.preset" => 0,
            "data.source" => 1,
            _ => 2,
        });
        let mut config = Self::default();
        for (key, value) in &pairs {
            config.set(key, value)?;
        }
        config.finish()?;
        Ok(config)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.preset" => {
                *m = match value {
                    "toy" => ViTConfig::toy(),
                    "vit_b16" => ViTConfig::vit_b16(),
                    _ => return Err(bad(key, value, "expected `toy` or `vit_b16`")),
                }
            }
            "model.image_size" => m.image_size = parse_value(key, value)?,
            "model.patch_size" => m.patch_size = parse_value(key, value)?,
            "model.channels" => m.channels = parse_value(key, value)?,
            "model.hidden_size" => m.hidden_size = parse_value(key, value)?,
            "model.mlp_size" => m.mlp_size = parse_value(key, value)?,
            "model.num_heads" => m.num_heads = parse_value(key, value)?,
            "model.depth" => m.depth = parse_value(key, value)?,
            "model.num_classes" => m.num_classes = parse_value(key, value)?,
            "model.layer_norm_eps" => m.layer_norm_eps = parse_value(key, value)?,
            "train.batch_size" => t.batch_size = parse_value(key, value)?,
            "train.learning_rate" => t.learning_rate = parse_value(key, value)?,
            "train.epochs" => t.epochs = parse_value(key, value)?,
            "train.weight_decay" => t.weight_decay = parse_value(key, value)?,
            "train.momentum" => t.momentum = parse_value(key, value)?,
            "train.seed" => t.seed = parse_value(key, value)?,
            "train.stop_at_train_acc" => {
                t.stop_at_train_acc = match value {
                    "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "train.record_time" => self.record_time = parse_value(key, value)?,
            "sparse.enabled" => t.sparse.enabled = parse_value(key, value)?,
            "sparse.position" => {
                t.sparse.position = value.parse::<SparsePosition>().map_err(|e| bad(key, value, e.to_string()))?
            }
            "sparse.lambda" => self.lambda = Some(parse_value(key, value)?),
            "prune.ratio" => self.prune.ratio = Some(parse_value(key, value)?),
            "prune.ratios" => self.prune.ratios = parse_list(key, value, |s| parse_value(key, s))?,
            "prune.exclude" => {
                self.prune.exclude =
                    parse_list(key, value, |s| ParamGroup::parse(s).map_err(|e| bad(key, s, e.to_string())))?
            }
            "data.source" => {
                self.data.source = match value {
                    "synthetic" => DataSource::Synthetic { noise: self.noise() },
                    "cifar_binary" => DataSource::CifarBinary { path: self.path() },
                    _ => return Err(bad(key, value, "expected `synthetic` or `cifar_binary`")),
                }
            }
            "data.path" => {
                self.data.source = match &self.data.source {
                    DataSource::CifarBinary { .. } => DataSource::CifarBinary { path: value.into() },
                    DataSource::Synthetic { .. } => {
                        return Err(bad(key, value, "set `data.source = cifar_binary` before `data.path`"))
                    }
                }
            }
            "data.noise" => match &mut self.data.source {
                DataSource::Synthetic { noise } => *noise = parse_value(key, value)?,
                DataSource::CifarBinary { .. } => {
                    return Err(bad(key, value, "noise applies only to the synthetic source"))
                }
            },
            "data.train_size" => self.data.train_size = parse_value(key, value)?,
            "data.test_size" => self.data.test_size = parse_value(key, value)?,
            "data.seed" => self.data.seed = parse_value(key, value)?,
            _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
        }
        Ok(())
    }

    fn noise(&self) -> f64 {
        match self.data.source {
            DataSource::Synthetic { noise } => noise,
            DataSource::CifarBinary { .. } => 0.05,
        }
    }

    fn path(&self) -> PathBuf {
        match &self.data.source {
            DataSource::CifarBinary { path } => path.clone(),
            DataSource::Synthetic { .. } => PathBuf::new(),
        }
    }

    /// Derives dependent fields and validates the whole configuration.
    fn finish(&mut self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.data.num_classes = self.model.num_classes;
        self.data.image_size = self.model.image_size;
        self.data.channels = self.model.channels;
        let position = self.train.sparse.position;
        let lambda = match self.lambda {
            Some(l) => l,
            None => default_lambda(position.feature_count(&self.model))
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
        };
        self.lambda = Some(lambda);
        let enabled = self.train.sparse.enabled;
        self.train.sparse =
            SparseConfig::new(position, lambda).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.sparse.enabled = enabled;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(r) = self.prune.ratio {
            check_ratio("prune.ratio", r)?;
        }
        for &r in &self.prune.ratios {
            check_ratio("prune.ratios", r)?;
        }
        if let DataSource::CifarBinary { path } = &self.data.source {
            if path.as_os_str().is_empty() {
                return Err(ConfigError::Invalid("`data.source = cifar_binary` needs `data.path`".into()));
            }
        }
        Ok(())
    }

    /// Overrides the training seed (the `--seed` flag).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    /// Every key with its effective value.
    pub fn resolved(&self) -> BTreeMap<&'static str, String> {
        let m = &self.model;
        let t = &self.train;
        let join = |v: Vec<String>| v.join(",");
        let mut out = BTreeMap::new();
        out.insert("model.image_size", m.image_size.to_string());
        out.insert("model.patch_size", m.patch_size.to_string());
        out.insert("model.channels", m.channels.to_string());
        out.insert("model.hidden_size", m.hidden_size.to_string());
        out.insert("model.mlp_size", m.mlp_size.to_string());
        out.insert("model.num_heads", m.num_heads.to_string());
        out.insert("model.depth", m.depth.to_string());
        out.insert("model.num_classes", m.num_classes.to_string());
        out.insert("model.layer_norm_eps", m.layer_norm_eps.to_string());
        out.insert("train.batch_size", t.batch_size.to_string());
        out.insert("train.learning_rate", t.learning_rate.to_string());
        out.insert("train.epochs", t.epochs.to_string());
        out.insert("train.weight_decay", t.weight_decay.to_string());
        out.insert("train.momentum", t.momentum.to_string());
        out.insert("train.seed", t.seed.to_string());
        out.insert(
            "train.stop_at_train_acc",
            t.stop_at_train_acc.map_or("none".to_string(), |v| v.to_string()),
        );
        out.insert("train.record_time", self.record_time.to_string());
        out.insert("sparse.enabled", t.sparse.enabled.to_string());
        out.insert("sparse.position", t.sparse.position.to_string());
        out.insert("sparse.lambda", t.sparse.lambda.to_string());
        if let Some(r) = self.prune.ratio {
            out.insert("prune.ratio", r.to_string());
        }
        out.insert("prune.ratios", join(self.prune.ratios.iter().map(f64::to_string).collect()));
        out.insert(
            "prune.exclude",
            join(self.prune.exclude.iter().map(|g| g.as_str().to_string()).collect()),
        );
        match &self.data.source {
            DataSource::Synthetic { noise } => {
                out.insert("data.source", "synthetic".into());
                out.insert("data.noise", noise.to_string());
            }
            DataSource::CifarBinary { path } => {
                out.insert("data.source", "cifar_binary".into());
                out.insert("data.path", path.display().to_string());
            }
        }
        out.insert("data.train_size", self.data.train_size.to_string());
        out.insert("data.test_size", self.data.test_size.to_string());
        out.insert("data.seed", self.data.seed.to_string());
        out
    }

    /// Config text that parses back to this configuration.
    pub fn to_text(&self) -> String {
        self.resolved().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn check_ratio(key: &str, r: f64) -> Result<(), ConfigError> {
    if r > 0.0 && r < 1.0 {
        Ok(())
    } else {
        Err(bad(key, &r.to_string(), "pruning ratios must lie in (0, 1)"))
    }
}
