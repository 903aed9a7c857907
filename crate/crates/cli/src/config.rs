//! JSON run configuration and `key.path=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use urie_core::classifier::PretrainConfig;
use urie_core::dataset::{build_test_split, build_toy_dataset, ToyDataset, DEFAULT_CLASSES};
use urie_core::eval::SplitSeeds;
use urie_core::net::UrieConfig;
use urie_core::train::TrainConfig;

use crate::error::{CliError, CliResult};

/// Synthetic shape dataset used for pretraining, enhancer training and
/// evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_per_class: usize,
    pub classes: usize,
    pub test_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_per_class: 64,
            classes: DEFAULT_CLASSES,
            test_per_class: 32,
        }
    }
}

impl DatasetConfig {
    pub fn train_set(&self) -> CliResult<ToyDataset> {
        Ok(build_toy_dataset(self.seed, self.n_per_class, self.classes)?)
    }

    pub fn test_set(&self) -> CliResult<ToyDataset> {
        Ok(build_test_split(self.seed, self.test_per_class, self.classes)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub dataset: DatasetConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub model: UrieConfig,
    /// Start the enhancer with a zero output head, i.e. as the identity.
    pub identity_init: bool,
    pub eval: SplitSeeds,
    /// Add wall-clock seconds to training logs. Breaks byte-identical logs.
    pub log_wall_time: bool,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            model: UrieConfig::default(),
            identity_init: true,
            eval: SplitSeeds::default(),
            log_wall_time: false,
        }
    }
}

impl CliConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults, or the file at `path`, with `overrides` applied in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        for o in overrides {
            cfg = cfg.with_override(o)?;
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies one `a.b.c=value` override. The value is read as JSON when it
    /// parses and as a string otherwise, so `train.loss_kind=mse` works
    /// unquoted.
    pub fn with_override(&self, assignment: &str) -> CliResult<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not key=value")))?;
        let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(self).expect("config serializes");
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| CliError::Config(format!("unknown config key `{key}`")))?;
        }
        if node.is_object() {
            return Err(CliError::Config(format!("`{key}` is a section, not a value")));
        }
        *node = value;
        serde_json::from_value(tree).map_err(|e| CliError::Config(format!("`{assignment}`: {e}")))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        let d = &self.dataset;
        if d.n_per_class == 0 || d.test_per_class == 0 {
            return Err(CliError::Config("dataset sizes must be positive".into()));
        }
        if self.pretrain.epochs == 0 {
            return Err(CliError::Config("pretrain.epochs must be positive".into()));
        }
        Ok(())
    }
}
