use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe_layer::LayerMode;
use crate::routing::{RouterConfig, RoutingStrategy};

pub const BYTE_VOCAB: usize = 256;

/// Mixture-of-experts settings shared by every MoE block of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeSpec {
    pub num_experts: usize,
    pub expert_dim: usize,
    pub strategy: RoutingStrategy,
    pub threshold: f32,
    pub capacity_factor: f32,
    #[serde(default)]
    pub mode: LayerMode,
    /// 0-based index of the first MoE block.
    #[serde(default = "default_first_block")]
    pub first_block: usize,
    /// Stride between MoE blocks; 2 means every alternate block.
    #[serde(default = "default_every")]
    pub every: usize,
}

fn default_first_block() -> usize {
    1
}

fn default_every() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Width of the dense FFN blocks; also the FLOPs normalization baseline.
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub aux_loss_weight: f32,
    pub moe: Option<MoeSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 128,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size: BYTE_VOCAB,
            max_seq_len: 32,
            aux_loss_weight: 0.01,
            moe: Some(MoeSpec {
                num_experts: 8,
                expert_dim: 32,
                strategy: RoutingStrategy::Threshold,
                threshold: 0.9,
                capacity_factor: 2.0,
                mode: LayerMode::Sparse,
                first_block: 1,
                every: 2,
            }),
        }
    }
}

impl ModelConfig {
    pub fn is_moe_block(&self, block: usize) -> bool {
        match &self.moe {
            Some(m) => block >= m.first_block && (block - m.first_block).is_multiple_of(m.every.max(1)),
            None => false,
        }
    }

    pub fn moe_blocks(&self) -> Vec<usize> {
        (0..self.num_layers).filter(|&b| self.is_moe_block(b)).collect()
    }

    pub fn router_config(&self) -> Option<RouterConfig> {
        self.moe.as_ref().map(|m| RouterConfig {
            num_experts: m.num_experts,
            hidden_dim: self.hidden_dim,
            threshold: m.threshold,
            strategy: m.strategy,
            capacity_factor: m.capacity_factor,
        })
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, value) in [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if value == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if self.num_heads > 0 && !self.hidden_dim.is_multiple_of(self.num_heads) {
            v.push(format!(
                "num_heads {} does not divide hidden_dim {}",
                self.num_heads, self.hidden_dim
            ));
        }
        if !(self.aux_loss_weight >= 0.0 && self.aux_loss_weight.is_finite()) {
            v.push(format!("aux_loss_weight {} must be non-negative", self.aux_loss_weight));
        }
        if let Some(m) = &self.moe {
            if m.expert_dim == 0 {
                v.push("expert_dim must be positive".into());
            }
            if m.every == 0 {
                v.push("moe.every must be positive".into());
            }
            if m.mode == LayerMode::DenseTrain && m.strategy != RoutingStrategy::Threshold {
                v.push("dense_train mode requires threshold routing".into());
            }
            if let Some(rc) = self.router_config() {
                v.extend(rc.violations());
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}
