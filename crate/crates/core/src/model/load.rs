// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FoldedWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tokenizer::TokenId;

/// Unfolded weights, exactly as stored in the checkpoint (in `f64`).
#[derive(Debug, Clone)]
pub struct RawWeights {
    pub config: ModelConfig,
    pub wte: Matrix,
    pub wpe: Matrix,
    pub layers: Vec<RawLayer>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
}

/// One transformer block. Projection matrices use the `x @ W` convention.
#[derive(Debug, Clone)]
pub struct RawLayer {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    /// d x 3d, columns ordered Q | K | V, heads contiguous inside each.
    pub c_attn_w: Matrix,
    pub c_attn_b: Vec<f64>,
    pub c_proj_w: Matrix,
    pub c_proj_b: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub fc_w: Matrix,
    pub fc_b: Vec<f64>,
    pub fc_proj_w: Matrix,
    pub fc_proj_b: Vec<f64>,
}

/// Folded model plus the sha256 digest of the file it came from.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub weights: FoldedWeights,
    pub digest: String,
}

impl LoadedModel {
    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }
}

/// Every tensor name read from a checkpoint with `n_layers` blocks.
/// A leading `transformer.` prefix is also accepted on load.
pub fn tensor_names(n_layers: usize) -> Vec<String> {
    let mut names = vec!["wte.weight".to_string(), "wpe.weight".to_string()];
    for l in 0..n_layers {
        for suffix in [
            "ln_1.weight",
            "ln_1.bias",
            "attn.c_attn.weight",
            "attn.c_attn.bias",
            "attn.c_proj.weight",
            "attn.c_proj.bias",
            "ln_2.weight",
            "ln_2.bias",
            "mlp.c_fc.weight",
            "mlp.c_fc.bias",
            "mlp.c_proj.weight",
            "mlp.c_proj.bias",
        ] {
            names.push(format!("h.{l}.{suffix}"));
        }
    }
    names.push("ln_f.weight".to_string());
    names.push("ln_f.bias".to_string());
    names
}

/// Reads and folds a safetensors checkpoint.
pub fn load_weights(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let (raw, digest) = load_raw(path)?;
    Ok(LoadedModel {
        weights: raw.fold(),
        digest,
    })
}

/// Reads a safetensors checkpoint without folding. Returns the weights and
/// the hex sha256 of the file.
pub fn load_raw(path: impl AsRef<Path>) -> Result<(RawWeights, String)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = hex_digest(&bytes);
    let raw = parse_raw(&bytes)?;
    Ok((raw, digest))
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn header_error(detail: impl std::fmt::Display) -> Error {
    Error::Load {
        tensor: "<header>".into(),
        detail: detail.to_string(),
    }
}

fn parse_raw(bytes: &[u8]) -> Result<RawWeights> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| header_error(format!("{e:?}")))?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| header_error(format!("{e:?}")))?;
    let md: HashMap<String, String> = meta.metadata().clone().unwrap_or_default();
    let prefix = if st.names().iter().any(|n| n.starts_with("transformer.")) {
        "transformer."
    } else {
        ""
    };
    let get = |name: &str, shape: &[usize]| -> Result<Vec<f64>> { read_tensor(&st, &format!("{prefix}{name}"), shape) };

    let wte_view = tensor_view(&st, &format!("{prefix}wte.weight"))?;
    let wpe_view = tensor_view(&st, &format!("{prefix}wpe.weight"))?;
    let (vocab, d) = dims2(&format!("{prefix}wte.weight"), wte_view.shape())?;
    let (ctx, _) = dims2(&format!("{prefix}wpe.weight"), wpe_view.shape())?;

    let mut n_layers = 0;
    while st.tensor(&format!("{prefix}h.{n_layers}.ln_1.weight")).is_ok() {
        n_layers += 1;
    }
    if n_layers == 0 {
        return Err(Error::Load {
            tensor: format!("{prefix}h.0.ln_1.weight"),
            detail: "missing".into(),
        });
    }
    let fc_name = format!("{prefix}h.0.mlp.c_fc.weight");
    let (_, d_mlp) = dims2(&fc_name, tensor_view(&st, &fc_name)?.shape())?;

    let n_heads = match md.get("n_head") {
        Some(v) => v
            .parse()
            .map_err(|_| header_error(format!("metadata n_head = {v:?}")))?,
        None => (d / 64).max(1),
    };
    let ln_eps = match md.get("layer_norm_epsilon") {
        Some(v) => v
            .parse()
            .map_err(|_| header_error(format!("metadata layer_norm_epsilon = {v:?}")))?,
        None => 1e-5,
    };
    if n_heads == 0 || d % n_heads != 0 {
        return Err(header_error(format!("d_model {d} not divisible by n_head {n_heads}")));
    }
    let config = ModelConfig {
        d_model: d,
        n_heads,
        n_layers,
        d_head: d / n_heads,
        d_mlp,
        vocab,
        ctx,
        ln_eps,
    };

    let wte = Matrix::new(vocab, d, get("wte.weight", &[vocab, d])?)?;
    let wpe = Matrix::new(ctx, d, get("wpe.weight", &[ctx, d])?)?;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let p = |s: &str| format!("h.{l}.{s}");
        layers.push(RawLayer {
            ln1_g: get(&p("ln_1.weight"), &[d])?,
            ln1_b: get(&p("ln_1.bias"), &[d])?,
            c_attn_w: Matrix::new(d, 3 * d, get(&p("attn.c_attn.weight"), &[d, 3 * d])?)?,
            c_attn_b: get(&p("attn.c_attn.bias"), &[3 * d])?,
            c_proj_w: Matrix::new(d, d, get(&p("attn.c_proj.weight"), &[d, d])?)?,
            c_proj_b: get(&p("attn.c_proj.bias"), &[d])?,
            ln2_g: get(&p("ln_2.weight"), &[d])?,
            ln2_b: get(&p("ln_2.bias"), &[d])?,
            fc_w: Matrix::new(d, d_mlp, get(&p("mlp.c_fc.weight"), &[d, d_mlp])?)?,
            fc_b: get(&p("mlp.c_fc.bias"), &[d_mlp])?,
            fc_proj_w: Matrix::new(d_mlp, d, get(&p("mlp.c_proj.weight"), &[d_mlp, d])?)?,
            fc_proj_b: get(&p("mlp.c_proj.bias"), &[d])?,
        });
    }
    Ok(RawWeights {
        config,
        wte,
        wpe,
        layers,
        lnf_g: get("ln_f.weight", &[d])?,
        lnf_b: get("ln_f.bias", &[d])?,
    })
}

fn tensor_view<'a>(st: &'a SafeTensors<'a>, name: &str) -> Result<safetensors::tensor::TensorView<'a>> {
    st.tensor(name).map_err(|_| Error::Load {
        tensor: name.to_string(),
        detail: "missing".into(),
    })
}

fn dims2(name: &str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Load {
            tensor: name.to_string(),
            detail: format!("expected a 2-d tensor, got shape {shape:?}"),
        }),
    }
}

fn read_tensor(st: &SafeTensors<'_>, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let view = tensor_view(st, name)?;
    if view.shape() != shape {
        return Err(Error::Load {
            tensor: name.to_string(),
            detail: format!("shape {:?}, expected {shape:?}", view.shape()),
        });
    }
    let data = view.data();
    let values: Vec<f64> = match view.dtype() {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        other => {
            return Err(Error::Load {
                tensor: name.to_string(),
                detail: format!("unsupported dtype {other:?} (expected F32 or F64)"),
            })
        }
    };
    if let Some(pos) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::Load {
            tensor: name.to_string(),
            detail: format!("non-finite value at flat index {pos}"),
        });
    }
    Ok(values)
}

/// Reference logits for a handful of prompts, as written by the fixture
/// generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitFixture {
    pub model: String,
    pub config: FixtureConfig,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub weights_sha256: Option<String>,
    pub prompts: Vec<FixturePrompt>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub vocab: usize,
    pub ctx: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ln_eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixturePrompt {
    #[serde(default)]
    pub text: Option<String>,
    pub ids: Vec<TokenId>,
    /// One row of `vocab` logits per position.
    pub logits: Vec<Vec<f64>>,
}

impl LogitFixture {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
