//! A tiny decoder-only Mixture-of-Experts language model.
//!
//! The model is deliberately small and synthetic: weights come from a seeded
//! ChaCha8 stream, attention is replaced by a causal mean-mixing surrogate, and
//! every forward pass reports which experts each token was routed to. That
//! routing report is what the memory simulator and the speculative decoder
//! consume.

mod forward;
mod ops;
mod weights;

pub use forward::{
    forward, forward_range, ActivationRecord, Decoder, ExpertRestriction, ForwardOutput, RemapStrategy,
    TokenActivation,
};
pub use ops::{greedy_next, probabilities, route_topk, sample_from_probs, sample_next, softmax};
pub use weights::{build_model, Expert, FfnBlock, LayerWeights, Matrix, ModelWeights, MoeBlock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token identifier, an index into the vocabulary.
pub type Token = usize;

/// Structural description of the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_layers: usize,
    /// `true` marks an MoE block, `false` a dense FFN.
    pub moe_layer_mask: Vec<bool>,
    pub experts_per_block: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Strength of the per-expert gate bias; larger values concentrate routing.
    pub gate_skew: f64,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::all_moe(4, 16, 2, 32, 64, 64)
    }
}

impl ModelSpec {
    /// A model where every layer is an MoE block, zero skew and seed 0.
    pub fn all_moe(
        num_layers: usize,
        experts_per_block: usize,
        top_k: usize,
        hidden_dim: usize,
        ffn_dim: usize,
        vocab_size: usize,
    ) -> Self {
        Self {
            num_layers,
            moe_layer_mask: vec![true; num_layers],
            experts_per_block,
            top_k,
            hidden_dim,
            ffn_dim,
            vocab_size,
            gate_skew: 0.0,
            seed: 0,
        }
    }

    pub fn with_skew(mut self, gate_skew: f64) -> Self {
        self.gate_skew = gate_skew;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidSpec(msg.to_string()));
        if self.experts_per_block < 1 {
            return fail("E >= 1 (experts_per_block)");
        }
        if self.top_k < 1 || self.top_k > self.experts_per_block {
            return fail("1 <= K <= E (top_k)");
        }
        if self.vocab_size < 2 {
            return fail("V >= 2 (vocab_size)");
        }
        if self.hidden_dim < 1 || self.ffn_dim < 1 {
            return fail("d, f >= 1 (hidden_dim, ffn_dim)");
        }
        if self.moe_layer_mask.len() != self.num_layers {
            return fail("moe_layer_mask length must equal num_layers");
        }
        if !self.moe_layer_mask.iter().any(|&m| m) {
            return fail("at least one layer must be an MoE block");
        }
        if !(self.gate_skew.is_finite() && self.gate_skew >= 0.0) {
            return fail("gate_skew must be finite and non-negative");
        }
        Ok(())
    }

    pub fn num_moe_layers(&self) -> usize {
        self.moe_layer_mask.iter().filter(|&&m| m).count()
    }

    /// Model-layer indices of the MoE blocks, in order.
    pub fn moe_layer_indices(&self) -> Vec<usize> {
        self.moe_layer_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    /// Number of parameters in one expert (up plus down projection).
    pub fn params_per_expert(&self) -> usize {
        2 * self.hidden_dim * self.ffn_dim
    }
}
