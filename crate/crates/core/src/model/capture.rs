// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::HeadId;
use crate::linalg::Matrix;
use crate::tokenizer::TokenId;

/// Activations of one attention head on one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCapture {
    /// Pre-softmax scores before the `1/sqrt(r)` scaling. Only the lower
    /// triangle is meaningful; use [`HeadCapture::score`] for masked access.
    pub scores: Matrix,
    /// Attention weights, zero above the diagonal.
    pub weights: Matrix,
    /// Per-token output written into the residual (n x d), after any
    /// upstream-output hook.
    pub output: Matrix,
    /// The head's input when a local hook changed it; `None` means the
    /// shared layer input was used.
    pub input_override: Option<Matrix>,
}

impl HeadCapture {
    /// Masked score: `-inf` above the diagonal.
    pub fn score(&self, i: usize, j: usize) -> f64 {
        if j > i {
            f64::NEG_INFINITY
        } else {
            self.scores.get(i, j)
        }
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights.get(i, j)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCapture {
    /// Centered residual entering the layer (n x d).
    pub residual_in: Matrix,
    /// `1 / sqrt(var + eps)` per token.
    pub ln_scale: Vec<f64>,
    /// Normalized input shared by all heads (n x d).
    pub normalized: Matrix,
    pub heads: Vec<HeadCapture>,
    /// Attention output bias added once per token.
    pub attn_bias: Vec<f64>,
    /// MLP output per token (n x d).
    pub mlp_out: Matrix,
}

/// Everything recorded during one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCapture {
    pub ids: Vec<TokenId>,
    /// Token plus position embedding (n x d).
    pub embed: Matrix,
    pub layers: Vec<LayerCapture>,
    /// Logit rows; the first row belongs to position `logits_start`.
    pub logits: Matrix,
    pub logits_start: usize,
}

impl RunCapture {
    pub fn n_tokens(&self) -> usize {
        self.ids.len()
    }

    pub fn head(&self, h: HeadId) -> &HeadCapture {
        &self.layers[h.layer].heads[h.head]
    }

    /// The normalized input this head actually read (n x d).
    pub fn head_input(&self, h: HeadId) -> &Matrix {
        let lc = &self.layers[h.layer];
        lc.heads[h.head].input_override.as_ref().unwrap_or(&lc.normalized)
    }

    pub fn ln_scale(&self, layer: usize, token: usize) -> f64 {
        self.layers[layer].ln_scale[token]
    }

    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }

    /// Logits at position `t`, if that row was computed.
    pub fn logits_at(&self, t: usize) -> Option<&[f64]> {
        t.checked_sub(self.logits_start)
            .filter(|&r| r < self.logits.rows())
            .map(|r| self.logits.row(r))
    }
}
