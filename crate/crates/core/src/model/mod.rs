// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2 forward pass with layer-norm folding, activation capture and
//! intervention hooks.

mod capture;
mod fold;
mod forward;
mod load;

pub use capture::{HeadCapture, LayerCapture, RunCapture};
pub use fold::{FoldedWeights, LayerWeights};
pub use forward::{HookScope, HookSign, HookSite, HookSpec, LogitRows};
pub use load::{load_raw, load_weights, tensor_names, LoadedModel, LogitFixture, RawLayer, RawWeights};

use serde::{Deserialize, Serialize};

use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab: usize,
    pub ctx: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn gpt2_small() -> Self {
        Self {
            d_model: 768,
            n_heads: 12,
            n_layers: 12,
            d_head: 64,
            d_mlp: 3072,
            vocab: 50257,
            ctx: 1024,
            ln_eps: 1e-5,
        }
    }
}

/// `(layer, head)`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.layer, self.head)
    }
}

/// `F(X)`: last-token logit of `io_id` minus that of `s_id`.
pub fn logit_diff(capture: &RunCapture, io_id: TokenId, s_id: TokenId) -> f64 {
    let last = capture.last_logits();
    last[io_id as usize] - last[s_id as usize]
}

/// The `gelu_new` activation used by GPT-2.
#[inline]
pub fn gelu_new(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}
