//! TOML run configuration. Every key is optional in the file and can be
//! overridden by the matching command-line flag.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nerkit::trainer::OptimizerKind;
use nerkit::{ModelKind, ToyEncoderConfig, TrainConfig};

/// Invalid configuration or arguments; reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let raw = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&raw)
        .map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))
}

pub fn write_resolved<T: Serialize>(value: &T, dir: &Path) -> anyhow::Result<PathBuf> {
    let path = dir.join("resolved-config.toml");
    let text = toml::to_string_pretty(value).context("serializing resolved config")?;
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn require_input(path: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    let path = path.clone().ok_or_else(|| {
        config_error(format!(
            "missing {what}: pass it as a flag or set it in the config file"
        ))
    })?;
    if !path.exists() {
        return Err(config_error(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingFile {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderFile {
    pub hash_size: Option<usize>,
    pub dim: Option<usize>,
    pub width: Option<usize>,
}

/// `train` and `meta-train` config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFile {
    pub model: Option<ModelKind>,
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub format: Option<String>,
    pub embeddings: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub types: Option<Vec<String>>,
    pub max_span_len: Option<usize>,
    pub window: Option<i64>,
    pub threshold: Option<f64>,
    pub seed: Option<u64>,
    pub training: TrainingFile,
    pub encoder: EncoderFile,
}

/// Flags shared by the training commands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainingFlags {
    /// Learning rate
    #[arg(long, value_name = "LR")]
    pub lr: Option<f64>,
    /// Samples per optimizer step
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without improvement before stopping
    #[arg(long)]
    pub patience: Option<usize>,
    /// sgd or adaptive-moments
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    /// Toy encoder hash buckets
    #[arg(long)]
    pub hash_size: Option<usize>,
    /// Toy encoder width
    #[arg(long)]
    pub dim: Option<usize>,
    /// Toy encoder context tokens on each side
    #[arg(long)]
    pub context_width: Option<usize>,
}

/// Fully resolved training settings, written next to the outputs.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedTraining {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerKind,
}

pub fn resolve_training(
    flags: &TrainingFlags,
    file: &TrainingFile,
    defaults: TrainConfig,
    seed: u64,
) -> anyhow::Result<TrainConfig> {
    let config = TrainConfig {
        learning_rate: flags
            .lr
            .or(file.learning_rate)
            .unwrap_or(defaults.learning_rate),
        batch_size: flags
            .batch_size
            .or(file.batch_size)
            .unwrap_or(defaults.batch_size),
        max_epochs: flags
            .max_epochs
            .or(file.max_epochs)
            .unwrap_or(defaults.max_epochs),
        patience: flags
            .patience
            .or(file.patience)
            .unwrap_or(defaults.patience),
        optimizer: flags
            .optimizer
            .or(file.optimizer)
            .unwrap_or(defaults.optimizer),
        seed,
    };
    config.validate().map_err(|e| config_error(e.to_string()))?;
    Ok(config)
}

pub fn resolve_encoder(flags: &TrainingFlags, file: &EncoderFile) -> ToyEncoderConfig {
    let d = ToyEncoderConfig::default();
    ToyEncoderConfig {
        hash_size: flags.hash_size.or(file.hash_size).unwrap_or(d.hash_size),
        dim: flags.dim.or(file.dim).unwrap_or(d.dim),
        width: flags.context_width.or(file.width).unwrap_or(d.width),
    }
}

impl From<&TrainConfig> for ResolvedTraining {
    fn from(c: &TrainConfig) -> Self {
        ResolvedTraining {
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            max_epochs: c.max_epochs,
            patience: c.patience,
            optimizer: c.optimizer,
        }
    }
}
