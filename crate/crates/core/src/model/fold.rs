// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-norm folding.
//!
//! Order of operations:
//! 1. fold each layer norm's scale and translation into the weights that
//!    read its output (Q, K, V, MLP-in, unembedding), then center those
//!    reading weights over the `d_model` axis;
//! 2. center every residual writer (token and position embeddings, W_O,
//!    b_O, MLP-out weight and bias) so each written vector has zero mean;
//! 3. fold the value bias into the attention output bias
//!    (`b_O += sum_h b_V[h] W_O[h]`, then `b_V = 0`).
//!
//! After this, each layer norm reduces to `x -> (x - mean(x)) / sqrt(var(x) + eps)`.

use serde::{Deserialize, Serialize};

use super::{HeadId, ModelConfig, RawWeights};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerWeights {
    /// d x d, head `h` owns columns `h*r..(h+1)*r`.
    pub w_q: Matrix,
    pub b_q: Vec<f64>,
    pub w_k: Matrix,
    pub b_k: Vec<f64>,
    pub w_v: Matrix,
    pub b_v: Vec<f64>,
    /// Per head, r x d.
    pub w_o: Vec<Matrix>,
    pub b_o: Vec<f64>,
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldedWeights {
    pub config: ModelConfig,
    pub w_e: Matrix,
    pub w_pos: Matrix,
    pub layers: Vec<LayerWeights>,
    /// d x vocab
    pub w_u: Matrix,
    pub b_u: Vec<f64>,
}

impl FoldedWeights {
    fn head_cols(&self, m: &Matrix, b: &[f64], head: usize) -> (Matrix, Vec<f64>) {
        let r = self.config.d_head;
        (
            m.col_block(head * r, (head + 1) * r),
            b[head * r..(head + 1) * r].to_vec(),
        )
    }

    /// `(W_Q, b_Q)` of one head: d x r and r.
    pub fn query(&self, h: HeadId) -> (Matrix, Vec<f64>) {
        let lw = &self.layers[h.layer];
        self.head_cols(&lw.w_q, &lw.b_q, h.head)
    }

    /// `(W_K, b_K)` of one head.
    pub fn key(&self, h: HeadId) -> (Matrix, Vec<f64>) {
        let lw = &self.layers[h.layer];
        self.head_cols(&lw.w_k, &lw.b_k, h.head)
    }

    /// `(W_V, b_V)` of one head.
    pub fn value(&self, h: HeadId) -> (Matrix, Vec<f64>) {
        let lw = &self.layers[h.layer];
        self.head_cols(&lw.w_v, &lw.b_v, h.head)
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        let nh = self.config.n_heads;
        (0..self.config.n_layers).flat_map(move |l| (0..nh).map(move |h| HeadId::new(l, h)))
    }
}

/// Folds `g`/`beta` into a reading matrix `w` (d x m) and bias `b`, then
/// centers every column of the result.
fn fold_reader(w: &Matrix, b: &[f64], g: &[f64], beta: &[f64]) -> (Matrix, Vec<f64>) {
    let (d, m) = (w.rows(), w.cols());
    let mut bias = b.to_vec();
    for r in 0..d {
        let row = w.row(r);
        for c in 0..m {
            bias[c] += beta[r] * row[c];
        }
    }
    let mut out = Matrix::zeros(d, m);
    let mut means = vec![0.0; m];
    for r in 0..d {
        let src = w.row(r);
        let dst = out.row_mut(r);
        for c in 0..m {
            dst[c] = g[r] * src[c];
            means[c] += dst[c];
        }
    }
    for x in means.iter_mut() {
        *x /= d as f64;
    }
    for r in 0..d {
        for (x, mu) in out.row_mut(r).iter_mut().zip(&means) {
            *x -= mu;
        }
    }
    (out, bias)
}

pub(crate) fn center_in_place(v: &mut [f64]) {
    let mu = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mu;
    }
}

fn center_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        center_in_place(m.row_mut(r));
    }
}

impl RawWeights {
    /// Applies the folding described in the module docs.
    pub fn fold(self) -> FoldedWeights {
        let cfg = self.config;
        let d = cfg.d_model;
        let r = cfg.d_head;

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for rl in self.layers {
            let q_raw = rl.c_attn_w.col_block(0, d);
            let k_raw = rl.c_attn_w.col_block(d, 2 * d);
            let v_raw = rl.c_attn_w.col_block(2 * d, 3 * d);
            let (w_q, b_q) = fold_reader(&q_raw, &rl.c_attn_b[..d], &rl.ln1_g, &rl.ln1_b);
            let (w_k, b_k) = fold_reader(&k_raw, &rl.c_attn_b[d..2 * d], &rl.ln1_g, &rl.ln1_b);
            let (w_v, b_v) = fold_reader(&v_raw, &rl.c_attn_b[2 * d..], &rl.ln1_g, &rl.ln1_b);
            let (w_in, b_in) = fold_reader(&rl.fc_w, &rl.fc_b, &rl.ln2_g, &rl.ln2_b);

            let mut w_o: Vec<Matrix> = (0..cfg.n_heads)
                .map(|h| rl.c_proj_w.row_block(h * r, (h + 1) * r))
                .collect();
            for m in w_o.iter_mut() {
                center_rows(m);
            }
            let mut b_o = rl.c_proj_b;
            center_in_place(&mut b_o);
            let mut w_out = rl.fc_proj_w;
            center_rows(&mut w_out);
            let mut b_out = rl.fc_proj_b;
            center_in_place(&mut b_out);

            for (h, wo) in w_o.iter().enumerate() {
                for c in 0..r {
                    let bv = b_v[h * r + c];
                    for (acc, x) in b_o.iter_mut().zip(wo.row(c)) {
                        *acc += bv * x;
                    }
                }
            }
            let b_v = vec![0.0; d];

            layers.push(LayerWeights {
                w_q,
                b_q,
                w_k,
                b_k,
                w_v,
                b_v,
                w_o,
                b_o,
                w_in,
                b_in,
                w_out,
                b_out,
            });
        }

        let wte_t = self.wte.transpose();
        let (w_u, b_u) = fold_reader(&wte_t, &vec![0.0; cfg.vocab], &self.lnf_g, &self.lnf_b);
        drop(wte_t);

        let mut w_e = self.wte;
        center_rows(&mut w_e);
        let mut w_pos = self.wpe;
        center_rows(&mut w_pos);

        FoldedWeights {
            config: cfg,
            w_e,
            w_pos,
            layers,
            w_u,
            b_u,
        }
    }
}
