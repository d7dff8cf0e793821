//! Run configuration: model, data and training sections in one JSON file.

use std::path::{Path, PathBuf};

use lgformer::model::{ModelConfig, Supervision};
use lgformer::synthshapes::GenConfig;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Validate every this many iterations (and after the last one).
    pub eval_interval: usize,
    pub supervision: Supervision,
    /// Seeds parameter init and batch order.
    pub seed: u64,
    /// Generated when no training set file is given.
    pub train_samples: usize,
    pub val_samples: usize,
    pub train_set: Option<PathBuf>,
    pub val_set: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            base_lr: 2e-4,
            weight_decay: 0.05,
            eval_interval: 200,
            supervision: Supervision::Joint,
            seed: 0,
            train_samples: 2000,
            val_samples: 200,
            train_set: None,
            val_set: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: GenConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            data: GenConfig::default(),
            train: TrainConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("reading config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.data.validate()?;
        if (self.data.height, self.data.width) != (self.model.image_h, self.model.image_w) {
            return Err(CliError::Validation(format!(
                "data size {}x{} differs from model input {}x{}",
                self.data.height, self.data.width, self.model.image_h, self.model.image_w
            )));
        }
        let t = &self.train;
        if t.iterations == 0 || t.batch_size == 0 || t.eval_interval == 0 {
            return Err(CliError::Validation("iterations, batch_size and eval_interval must be positive".into()));
        }
        if !(t.base_lr > 0.0 && t.weight_decay >= 0.0) {
            return Err(CliError::Validation("base_lr must be positive and weight_decay non-negative".into()));
        }
        if (t.train_set.is_none() && t.train_samples == 0) || (t.val_set.is_none() && t.val_samples == 0) {
            return Err(CliError::Validation("generated train and validation sets need at least one sample".into()));
        }
        Ok(())
    }

    /// Pretty JSON with every key spelled out.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.seed = 9;
        cfg.train.train_set = Some("a.bin".into());
        let back = RunConfig::parse(&cfg.canonical_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.canonical_json(), cfg.canonical_json());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [r#"{"modle": {}}"#, r#"{"train": {"lr": 1}}"#, r#"{"model": {"heads": 2}}"#] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Validation(_))), "{text}");
        }
        assert!(RunConfig::parse("{}").is_ok());
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let err = RunConfig::parse(r#"{"data": {"height": 96}}"#).unwrap_err();
        assert!(err.to_string().contains("differs"));
    }
}
