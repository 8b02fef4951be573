//! Decoder-only transformer with a frozen base, a temporal/spatial pair of
//! low-rank adapters routed by token role, a linear visual adapter and the
//! `<LOC>` vocabulary extension.

mod checkpoint;
mod model;
pub mod tokenizer;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_params, read_tensor, save_params, write_tensor};
pub use model::{dual_lora_linear, Backbone, Generation, KvCache, Lora, TokenStream};
pub use tokenizer::Tokenizer;

use crate::error::invalid;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    T,
    S,
    Text,
    Loc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proj {
    Q,
    K,
    V,
    O,
    MlpUp,
    MlpDown,
}

impl Proj {
    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "attn.q",
            Proj::K => "attn.k",
            Proj::V => "attn.v",
            Proj::O => "attn.o",
            Proj::MlpUp => "mlp.up",
            Proj::MlpDown => "mlp.down",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualAdapterConfig {
    pub total_rank: usize,
    /// Share of the rank given to the temporal adapter.
    pub alpha_split: f64,
    pub lora_alpha: f64,
    pub projections: Vec<Proj>,
}

impl Default for DualAdapterConfig {
    fn default() -> Self {
        DualAdapterConfig {
            total_rank: 64,
            alpha_split: 0.5,
            lora_alpha: 64.0,
            projections: vec![Proj::Q, Proj::V],
        }
    }
}

impl DualAdapterConfig {
    pub fn temporal_rank(&self) -> usize {
        (self.total_rank as f64 * self.alpha_split).round() as usize
    }

    pub fn spatial_rank(&self) -> usize {
        self.total_rank - self.temporal_rank()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_split) {
            return Err(invalid!("alpha_split must lie in [0, 1], got {}", self.alpha_split));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(invalid!("lora_alpha must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub context: usize,
    pub feat_dim: usize,
    pub adapter: DualAdapterConfig,
    pub train_visual_adapter: bool,
    /// Std of the frozen token embeddings (also the tied output head).
    pub embed_std: f64,
    pub ln_eps: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 4,
            d_model: 128,
            heads: 4,
            mlp_hidden: 512,
            context: 1024,
            feat_dim: 64,
            adapter: DualAdapterConfig::default(),
            train_visual_adapter: false,
            embed_std: 0.3,
            ln_eps: 1e-5,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 {
            return Err(invalid!("layers, d_model and heads must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(invalid!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        self.adapter.validate()
    }
}
