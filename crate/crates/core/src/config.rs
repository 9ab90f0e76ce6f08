//! Model and training hyperparameters.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// Normalize the input of each sublayer.
    Pre,
    /// Normalize after each residual sum.
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Dot,
    Cosine,
}

/// How a sequence's latent rows are summarized into the contrastive vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Row at the last position (the most recent item).
    Anchor,
    /// Mean over non-padded rows.
    Mean,
}

/// Which hidden state is dotted with the item table to produce scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFrom {
    Decoder,
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_items: usize,
    pub max_len: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub norm: NormPlacement,
    /// Weight of the contrastive term.
    pub alpha: f64,
    /// Weight of the two KL terms.
    pub beta: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub similarity: Similarity,
    pub pooling: Pooling,
    pub score_from: ScoreFrom,
    /// When false only the first view is decoded and scored (no second
    /// reconstruction or KL term).
    pub twin: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_items: 0,
            max_len: 50,
            hidden_dim: 64,
            num_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            dropout: 0.2,
            norm: NormPlacement::Pre,
            alpha: 0.03,
            beta: 0.2,
            tau: 1.0,
            similarity: Similarity::Dot,
            pooling: Pooling::Anchor,
            score_from: ScoreFrom::Decoder,
            twin: true,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_items == 0 {
            return bad("num_items must be positive");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        if self.hidden_dim == 0 || self.num_heads == 0 {
            return bad("hidden_dim and num_heads must be positive");
        }
        if self.hidden_dim % self.num_heads != 0 {
            return bad("hidden_dim must be divisible by num_heads");
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("encoder and decoder need at least one layer");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// First 8 bytes of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Stage 1 on the main parameters, then stage 2 on the second variance head.
    MetaTwoStep,
    /// One update of every parameter under the full objective.
    Joint,
}

/// When the second-stage update runs in meta mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Granularity {
    PerBatch,
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub mode: TrainMode,
    pub stage2: Stage2Granularity,
    pub seed: u64,
    /// Storage precision of checkpoints. Arithmetic is always 64-bit.
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 256,
            max_epochs: 200,
            patience: 100,
            mode: TrainMode::MetaTwoStep,
            stage2: Stage2Granularity::PerBatch,
            seed: 42,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("lr must be non-negative".into()));
        }
        Ok(())
    }
}
