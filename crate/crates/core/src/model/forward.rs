// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::capture::{HeadCapture, LayerCapture, RunCapture};
use super::fold::center_in_place;
use super::{gelu_new, FoldedWeights, HeadId, RawWeights};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, matmul_into, Matrix};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookSite {
    /// Modify a head's output before it is added to the residual.
    UpstreamHeadOutput,
    /// Modify the normalized input read by a head.
    DownstreamHeadInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookScope {
    SingleHead,
    /// Every head of the layer (input hooks only).
    WholeLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookSign {
    Add,
    Subtract,
}

impl HookSign {
    pub fn factor(self) -> f64 {
        match self {
            HookSign::Add => 1.0,
            HookSign::Subtract => -1.0,
        }
    }
}

/// One residual-stream edit.
///
/// `delta` is always given in residual units. For input hooks the model
/// centers it and multiplies by the token's layer-norm scale before adding
/// it to the normalized input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HookSpec {
    pub site: HookSite,
    pub layer: usize,
    pub head: usize,
    pub token: usize,
    pub delta: Vec<f64>,
    pub sign: HookSign,
    pub scope: HookScope,
}

/// Which positions get logits computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogitRows {
    #[default]
    All,
    Last,
}

struct LayerNormOut {
    centered: Matrix,
    scale: Vec<f64>,
    normalized: Matrix,
}

fn layer_norm(x: &Matrix, eps: f64) -> LayerNormOut {
    let (n, d) = (x.rows(), x.cols());
    let mut centered = x.clone();
    let mut normalized = Matrix::zeros(n, d);
    let mut scale = Vec::with_capacity(n);
    for t in 0..n {
        let row = centered.row_mut(t);
        center_in_place(row);
        let var = dot(row, row) / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        scale.push(s);
        for (o, v) in normalized.row_mut(t).iter_mut().zip(centered.row(t)) {
            *o = v * s;
        }
    }
    LayerNormOut {
        centered,
        scale,
        normalized,
    }
}

/// `x * w + b` for every row of `x`.
fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    matmul_into(x.as_slice(), x.rows(), x.cols(), w, out.as_mut_slice());
    for t in 0..out.rows() {
        for (o, bv) in out.row_mut(t).iter_mut().zip(b) {
            *o += bv;
        }
    }
    out
}

/// Causal softmax of `scores / sqrt(r)`; returns the weight matrix.
fn causal_softmax(scores: &Matrix, r: usize) -> Matrix {
    let n = scores.rows();
    let inv = 1.0 / (r as f64).sqrt();
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        let row = &scores.row(i)[..=i];
        let m = row.iter().map(|s| s * inv).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let out = w.row_mut(i);
        for j in 0..=i {
            let e = (row[j] * inv - m).exp();
            out[j] = e;
            sum += e;
        }
        for x in out[..=i].iter_mut() {
            *x /= sum;
        }
    }
    w
}

impl FoldedWeights {
    fn validate(&self, ids: &[TokenId], hooks: &[HookSpec]) -> Result<()> {
        let cfg = &self.config;
        if ids.is_empty() {
            return Err(Error::Contract {
                op: "forward",
                detail: "empty prompt".into(),
            });
        }
        if ids.len() > cfg.ctx {
            return Err(Error::Range(format!(
                "prompt length {} exceeds context {}",
                ids.len(),
                cfg.ctx
            )));
        }
        if let Some(id) = ids.iter().find(|&&id| id as usize >= cfg.vocab) {
            return Err(Error::Range(format!("token id {id} >= vocab {}", cfg.vocab)));
        }
        for (k, h) in hooks.iter().enumerate() {
            if h.layer >= cfg.n_layers || h.head >= cfg.n_heads || h.token >= ids.len() {
                return Err(Error::Range(format!(
                    "hook {k}: layer {} head {} token {} outside {}x{} heads / {} tokens",
                    h.layer,
                    h.head,
                    h.token,
                    cfg.n_layers,
                    cfg.n_heads,
                    ids.len()
                )));
            }
            if h.delta.len() != cfg.d_model {
                return Err(Error::Shape {
                    op: "forward",
                    detail: format!(
                        "hook {k}: delta has {} entries, expected {}",
                        h.delta.len(),
                        cfg.d_model
                    ),
                });
            }
            if h.site == HookSite::UpstreamHeadOutput && h.scope == HookScope::WholeLayer {
                return Err(Error::Contract {
                    op: "forward",
                    detail: format!("hook {k}: whole-layer scope applies to input hooks only"),
                });
            }
        }
        Ok(())
    }

    /// Runs the model, computing logits at every position.
    pub fn forward(&self, ids: &[TokenId], hooks: &[HookSpec]) -> Result<RunCapture> {
        self.forward_with(ids, hooks, LogitRows::All)
    }

    pub fn forward_with(&self, ids: &[TokenId], hooks: &[HookSpec], rows: LogitRows) -> Result<RunCapture> {
        self.validate(ids, hooks)?;
        let cfg = &self.config;
        let (n, d, r, nh) = (ids.len(), cfg.d_model, cfg.d_head, cfg.n_heads);

        let mut x = Matrix::zeros(n, d);
        for (t, &id) in ids.iter().enumerate() {
            let row = x.row_mut(t);
            row.copy_from_slice(self.w_e.row(id as usize));
            for (a, p) in row.iter_mut().zip(self.w_pos.row(t)) {
                *a += p;
            }
        }
        let embed = x.clone();

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, lw) in self.layers.iter().enumerate() {
            let ln = layer_norm(&x, cfg.ln_eps);

            let mut inputs: Vec<Option<Matrix>> = vec![None; nh];
            for hk in hooks
                .iter()
                .filter(|h| h.site == HookSite::DownstreamHeadInput && h.layer == l)
            {
                let mut dv = hk.delta.clone();
                center_in_place(&mut dv);
                let alpha = hk.sign.factor() * ln.scale[hk.token];
                let targets = match hk.scope {
                    HookScope::SingleHead => hk.head..hk.head + 1,
                    HookScope::WholeLayer => 0..nh,
                };
                for h in targets {
                    let m = inputs[h].get_or_insert_with(|| ln.normalized.clone());
                    axpy(alpha, &dv, m.row_mut(hk.token));
                }
            }
            for inp in inputs.iter_mut() {
                if inp.as_ref() == Some(&ln.normalized) {
                    *inp = None;
                }
            }

            let q_all = affine(&ln.normalized, &lw.w_q, &lw.b_q);
            let k_all = affine(&ln.normalized, &lw.w_k, &lw.b_k);
            let v_all = affine(&ln.normalized, &lw.w_v, &lw.b_v);

            let mut attn_out = Matrix::zeros(n, d);
            let mut heads = Vec::with_capacity(nh);
            for (h, input) in inputs.into_iter().enumerate() {
                let cols = h * r..(h + 1) * r;
                let (q, k, v) = match &input {
                    None => (
                        q_all.col_block(cols.start, cols.end),
                        k_all.col_block(cols.start, cols.end),
                        v_all.col_block(cols.start, cols.end),
                    ),
                    Some(inp) => (
                        affine(inp, &lw.w_q.col_block(cols.start, cols.end), &lw.b_q[cols.clone()]),
                        affine(inp, &lw.w_k.col_block(cols.start, cols.end), &lw.b_k[cols.clone()]),
                        affine(inp, &lw.w_v.col_block(cols.start, cols.end), &lw.b_v[cols.clone()]),
                    ),
                };
                let mut scores = Matrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..=i {
                        scores.set(i, j, dot(q.row(i), k.row(j)));
                    }
                }
                let weights = causal_softmax(&scores, r);
                let mut z = Matrix::zeros(n, r);
                for i in 0..n {
                    let zi = z.row_mut(i);
                    for j in 0..=i {
                        axpy(weights.get(i, j), v.row(j), zi);
                    }
                }
                let mut output = Matrix::zeros(n, d);
                matmul_into(z.as_slice(), n, r, &lw.w_o[h], output.as_mut_slice());
                for hk in hooks
                    .iter()
                    .filter(|hk| hk.site == HookSite::UpstreamHeadOutput && hk.layer == l && hk.head == h)
                {
                    axpy(hk.sign.factor(), &hk.delta, output.row_mut(hk.token));
                }
                for t in 0..n {
                    axpy(1.0, output.row(t), attn_out.row_mut(t));
                }
                heads.push(HeadCapture {
                    scores,
                    weights,
                    output,
                    input_override: input,
                });
            }
            for t in 0..n {
                let row = x.row_mut(t);
                for ((xv, a), b) in row.iter_mut().zip(attn_out.row(t)).zip(&lw.b_o) {
                    *xv += a + b;
                }
            }

            let ln2 = layer_norm(&x, cfg.ln_eps);
            let mut hidden = affine(&ln2.normalized, &lw.w_in, &lw.b_in);
            for v in hidden.as_mut_slice() {
                *v = gelu_new(*v);
            }
            let mlp_out = affine(&hidden, &lw.w_out, &lw.b_out);
            for t in 0..n {
                axpy(1.0, mlp_out.row(t), x.row_mut(t));
            }

            layers.push(LayerCapture {
                residual_in: ln.centered,
                ln_scale: ln.scale,
                normalized: ln.normalized,
                heads,
                attn_bias: lw.b_o.clone(),
                mlp_out,
            });
        }

        let lnf = layer_norm(&x, cfg.ln_eps);
        let start = match rows {
            LogitRows::All => 0,
            LogitRows::Last => n - 1,
        };
        let logits = affine(&lnf.normalized.row_block(start, n), &self.w_u, &self.b_u);
        Ok(RunCapture {
            ids: ids.to_vec(),
            embed,
            layers,
            logits,
            logits_start: start,
        })
    }

    /// Attention score `A'_ij` of one head, recomputed from the capture.
    pub fn recompute_score(&self, cap: &RunCapture, h: HeadId, i: usize, j: usize) -> f64 {
        let (wq, bq) = self.query(h);
        let (wk, bk) = self.key(h);
        let x = cap.head_input(h);
        let q: Vec<f64> = (0..wq.cols())
            .map(|c| bq[c] + (0..wq.rows()).map(|p| x.get(i, p) * wq.get(p, c)).sum::<f64>())
            .collect();
        let k: Vec<f64> = (0..wk.cols())
            .map(|c| bk[c] + (0..wk.rows()).map(|p| x.get(j, p) * wk.get(p, c)).sum::<f64>())
            .collect();
        dot(&q, &k)
    }
}

fn reference_layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    let s = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(g)
        .zip(b)
        .map(|((v, gi), bi)| (v - mu) * s * gi + bi)
        .collect()
}

impl RawWeights {
    /// Unfolded textbook forward pass, used to check folding. Returns
    /// logits for every position (n x vocab).
    pub fn reference_logits(&self, ids: &[TokenId]) -> Result<Matrix> {
        let cfg = &self.config;
        let (n, d, r, nh) = (ids.len(), cfg.d_model, cfg.d_head, cfg.n_heads);
        if let Some(id) = ids.iter().find(|&&id| id as usize >= cfg.vocab) {
            return Err(Error::Range(format!("token id {id} >= vocab {}", cfg.vocab)));
        }
        let mut x: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| {
                self.wte
                    .row(id as usize)
                    .iter()
                    .zip(self.wpe.row(t))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();
        for lw in &self.layers {
            let h1: Vec<Vec<f64>> = x
                .iter()
                .map(|row| reference_layer_norm(row, &lw.ln1_g, &lw.ln1_b, cfg.ln_eps))
                .collect();
            let qkv: Vec<Vec<f64>> = h1
                .iter()
                .map(|row| {
                    (0..3 * d)
                        .map(|c| lw.c_attn_b[c] + (0..d).map(|p| row[p] * lw.c_attn_w.get(p, c)).sum::<f64>())
                        .collect()
                })
                .collect();
            let mut z = vec![vec![0.0; d]; n];
            for h in 0..nh {
                for i in 0..n {
                    let s: Vec<f64> = (0..=i)
                        .map(|j| {
                            (0..r).map(|c| qkv[i][h * r + c] * qkv[j][d + h * r + c]).sum::<f64>() / (r as f64).sqrt()
                        })
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                    let tot: f64 = e.iter().sum();
                    for (j, ej) in e.iter().enumerate() {
                        for c in 0..r {
                            z[i][h * r + c] += ej / tot * qkv[j][2 * d + h * r + c];
                        }
                    }
                }
            }
            for i in 0..n {
                for c in 0..d {
                    x[i][c] += lw.c_proj_b[c] + (0..d).map(|p| z[i][p] * lw.c_proj_w.get(p, c)).sum::<f64>();
                }
            }
            let dm = cfg.d_mlp;
            for row in x.iter_mut() {
                let h2 = reference_layer_norm(row, &lw.ln2_g, &lw.ln2_b, cfg.ln_eps);
                let hid: Vec<f64> = (0..dm)
                    .map(|c| gelu_new(lw.fc_b[c] + (0..d).map(|p| h2[p] * lw.fc_w.get(p, c)).sum::<f64>()))
                    .collect();
                for c in 0..d {
                    row[c] += lw.fc_proj_b[c] + (0..dm).map(|p| hid[p] * lw.fc_proj_w.get(p, c)).sum::<f64>();
                }
            }
        }
        let mut logits = Matrix::zeros(n, cfg.vocab);
        for (t, row) in x.iter().enumerate() {
            let f = reference_layer_norm(row, &self.lnf_g, &self.lnf_b, cfg.ln_eps);
            for v in 0..cfg.vocab {
                logits.set(t, v, dot(&f, self.wte.row(v)));
            }
        }
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one_and_mask() {
        let s = Matrix::from_fn(4, 4, |i, j| (i * 3 + j) as f64 - 2.0);
        let w = causal_softmax(&s, 64);
        for i in 0..4 {
            let sum: f64 = w.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for j in i + 1..4 {
                assert_eq!(w.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn layer_norm_scale_gives_unit_rms() {
        let x = Matrix::from_fn(3, 8, |i, j| ((i + 1) * (j + 2)) as f64 * 0.37 - 1.0);
        let ln = layer_norm(&x, 0.0);
        for t in 0..3 {
            let row = ln.normalized.row(t);
            let rms = (dot(row, row) / 8.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-12);
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_new(0.0), 0.0);
        assert!((gelu_new(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((gelu_new(-1.0) + 0.158_808_009_391_723_2).abs() < 1e-12);
    }
}
