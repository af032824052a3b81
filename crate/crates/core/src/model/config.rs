use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and objective settings of one FT-Transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FttConfig {
    /// Input features M. Zero means "take it from the data".
    pub n_features: usize,
    pub token_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_factor: f64,
    pub residual_dropout: f64,
    pub attention_dropout: f64,
    pub ffn_dropout: f64,
    pub projection_dims: Vec<usize>,
    /// Zero means "take it from the data".
    pub n_classes: usize,
    pub mask_rate: f64,
    pub temperature: f64,
    /// Add the masked-anchored NTXent term as well.
    pub symmetric_ntxent: bool,
}

impl Default for FttConfig {
    fn default() -> Self {
        FttConfig {
            n_features: 0,
            token_dim: 192,
            n_layers: 3,
            n_heads: 8,
            ffn_factor: 4.0 / 3.0,
            residual_dropout: 0.0,
            attention_dropout: 0.2,
            ffn_dropout: 0.1,
            projection_dims: vec![192, 128],
            n_classes: 0,
            mask_rate: 0.45,
            temperature: 1.0,
            symmetric_ntxent: false,
        }
    }
}

fn check_prob(name: &str, p: f64, allow_one: bool) -> Result<()> {
    let ok = p >= 0.0 && (p < 1.0 || (allow_one && p <= 1.0));
    if !ok {
        let range = if allow_one { "[0, 1]" } else { "[0, 1)" };
        return Err(Error::Config(format!("{name} must be in {range}, got {p}")));
    }
    Ok(())
}

impl FttConfig {
    pub fn ffn_hidden(&self) -> usize {
        ((self.token_dim as f64 * self.ffn_factor).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 {
            return Err(Error::Config("n_features must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        if self.token_dim == 0 || self.n_heads == 0 || self.token_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "token_dim {} must be a positive multiple of n_heads {}",
                self.token_dim, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if !(self.ffn_factor > 0.0) {
            return Err(Error::Config(format!("ffn_factor must be > 0, got {}", self.ffn_factor)));
        }
        check_prob("residual_dropout", self.residual_dropout, false)?;
        check_prob("attention_dropout", self.attention_dropout, false)?;
        check_prob("ffn_dropout", self.ffn_dropout, false)?;
        check_prob("mask_rate", self.mask_rate, true)?;
        if self.projection_dims.is_empty() || self.projection_dims.contains(&0) {
            return Err(Error::Config("projection_dims must be non-empty and positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Plain multi-layer perceptron baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    /// Hidden layers.
    pub n_layers: usize,
    /// Width of hidden layer i+1 is round(width_i · factor), starting from the input width.
    pub layer_size_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            n_layers: 3,
            layer_size_factor: 0.75,
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("MLP n_layers must be >= 1".into()));
        }
        if !(self.layer_size_factor > 0.0) {
            return Err(Error::Config("layer_size_factor must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("MLP epochs, batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden_widths(&self, n_features: usize) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.n_layers);
        let mut w = n_features as f64;
        for _ in 0..self.n_layers {
            let next = ((w * self.layer_size_factor).round() as usize).max(1);
            widths.push(next);
            w = next as f64;
        }
        widths
    }
}
