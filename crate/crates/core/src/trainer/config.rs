use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::Strategy;
use crate::model::{HeadKind, ModelConfig};

fn default_lr() -> f64 {
    0.001
}
fn default_batch_size() -> usize {
    20
}
fn default_epochs() -> usize {
    50
}
fn default_dropout() -> f64 {
    0.5
}
fn default_clip() -> f64 {
    5.0
}
fn default_weight_decay() -> f64 {
    1e-6
}
fn default_init_range() -> f64 {
    0.2
}
fn default_seed() -> u64 {
    1
}
fn default_embed_dim() -> usize {
    200
}
fn default_hidden() -> usize {
    200
}
fn default_layers() -> usize {
    2
}
fn default_desc_hidden() -> usize {
    50
}
fn default_cnn_channels() -> usize {
    50
}
fn default_cnn_window() -> usize {
    3
}
fn default_min_count() -> usize {
    1
}
fn default_train_ratio() -> f64 {
    0.8
}
fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.01, 0.025, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0]
}
fn default_repeats() -> usize {
    10
}
fn default_true() -> bool {
    true
}
fn default_strategy() -> Strategy {
    Strategy::OneHot
}
fn default_head() -> HeadKind {
    HeadKind::Softmax
}

/// Training hyperparameters; the defaults follow the experimental setup
/// (Adam at 0.001, 50 epochs, dropout 0.5, clip norm 5, weight decay
/// 1e-6, uniform init in [-0.2, 0.2], 2-layer BLSTM with 200 units).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_head")]
    pub head: HeadKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Per-domain batch size overrides.
    #[serde(default)]
    pub domain_batch_sizes: BTreeMap<String, usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_init_range")]
    pub init_range: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_desc_hidden")]
    pub desc_hidden: usize,
    #[serde(default = "default_cnn_channels")]
    pub cnn_channels: usize,
    #[serde(default = "default_cnn_window")]
    pub cnn_window: usize,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    /// Fraction of the training data kept for training in the
    /// train/validation split (the rest validates).
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
    /// Target-data fractions for `sweep`.
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Cap on exemplars per slot when building label embeddings.
    #[serde(default)]
    pub exemplars_per_slot: Option<usize>,
    #[serde(default = "default_true")]
    pub desc_shares_input_embedding: bool,
    /// Keep fine-tuning the input embeddings (vs. freezing them).
    #[serde(default = "default_true")]
    pub train_input_embeddings: bool,
    /// Initialize the input embeddings from a supplied embedding file.
    #[serde(default = "default_true")]
    pub use_pretrained_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    /// Read a TOML or JSON config, chosen by file extension.
    pub fn load(path: impl AsRef<Path>) -> Result<TrainConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("clip_norm", self.clip_norm),
            ("init_range", self.init_range),
            ("train_ratio", self.train_ratio),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(0.0 < self.train_ratio && self.train_ratio < 1.0) {
            return Err(Error::Config(format!(
                "train_ratio {} not in (0, 1)",
                self.train_ratio
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.layers == 0 {
            return Err(Error::Config("batch_size, epochs, and layers must be positive".into()));
        }
        if self.fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return Err(Error::Config("sweep fractions must lie in [0, 1]".into()));
        }
        if self.cnn_window % 2 == 0 {
            return Err(Error::Config("cnn_window must be odd".into()));
        }
        Ok(())
    }

    pub fn batch_size_for(&self, domain: &str) -> usize {
        self.domain_batch_sizes
            .get(domain)
            .copied()
            .unwrap_or(self.batch_size)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            strategy: self.strategy,
            head: self.head,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            layers: self.layers,
            dropout: self.dropout,
            desc_hidden: self.desc_hidden,
            cnn_channels: self.cnn_channels,
            cnn_window: self.cnn_window,
            desc_shares_input_embedding: self.desc_shares_input_embedding,
            train_input_embeddings: self.train_input_embeddings,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_experimental_setup() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.dropout, 0.5);
        assert_eq!(cfg.clip_norm, 5.0);
        assert_eq!(cfg.weight_decay, 1e-6);
        assert_eq!(cfg.init_range, 0.2);
        assert_eq!(cfg.hidden, 200);
        assert_eq!(cfg.layers, 2);
        assert_eq!(cfg.repeats, 10);
        assert_eq!(cfg.train_ratio, 0.8);
    }

    #[test]
    fn toml_round_trip() {
        let toml_text = r#"
            strategy = "atomic"
            head = "crf-bilinear"
            hidden = 32
            batch_size = 5
            [domain_batch_sizes]
            flight = 5
        "#;
        let cfg: TrainConfig = toml::from_str(toml_text).unwrap();
        assert_eq!(cfg.strategy, Strategy::AtomicConcept);
        assert_eq!(cfg.head, HeadKind::CrfBilinear);
        assert_eq!(cfg.hidden, 32);
        assert_eq!(cfg.batch_size_for("flight"), 5);
        assert_eq!(cfg.batch_size_for("other"), 5);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.fractions = vec![0.5, 1.5];
        assert!(cfg.validate().is_err());
    }
}
