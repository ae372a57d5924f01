use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::folding::FoldingConfig;
use crate::model::tokenizer::BYTE_VOCAB;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub fold_enabled: bool,
    /// Layers whose residual stream passes through a folding module. Empty means every
    /// layer.
    pub fold_layers: Vec<usize>,
    pub folding: FoldingConfig,
    /// Steps between k-means refreshes of the cluster centers; 0 disables refreshing.
    pub center_refresh: usize,
    /// Pins every gate to this value and stops it from training.
    pub fixed_gate: Option<f64>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: BYTE_VOCAB,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq: 128,
            fold_enabled: true,
            fold_layers: Vec::new(),
            folding: FoldingConfig::default(),
            center_refresh: 50,
            fixed_gate: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < BYTE_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold the {BYTE_VOCAB} byte tokens",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return Err(Error::Config(
                "n_layers, d_ff and max_seq must be positive".into(),
            ));
        }
        if let Some(&l) = self.fold_layers.iter().find(|&&l| l >= self.n_layers) {
            return Err(Error::Config(format!(
                "fold layer {l} outside [0, {})",
                self.n_layers
            )));
        }
        if let Some(g) = self.fixed_gate {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::Config(format!("fixed_gate {g} outside [0, 1]")));
            }
        }
        self.folding.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Whether layer `l` runs a folding module in this configuration.
    pub fn folds_at(&self, l: usize) -> bool {
        self.fold_enabled && (self.fold_layers.is_empty() || self.fold_layers.contains(&l))
    }
}
