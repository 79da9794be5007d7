// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::path::PathBuf;

use svtrace::ioi::{generate_dataset, IoiAssets, IoiPrompt};
use svtrace::model::{load_weights, FoldedWeights};
use svtrace::omega::OmegaSet;
use svtrace::tokenizer::BpeVocab;

pub fn data(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

pub fn vocab() -> BpeVocab {
    BpeVocab::load(data("vocab.json"), data("merges.txt")).unwrap()
}

pub struct Tiny {
    pub weights: FoldedWeights,
    pub omegas: OmegaSet,
}

pub fn tiny() -> Tiny {
    let weights = load_weights(data("fixtures/tiny_gpt2.safetensors")).unwrap().weights;
    let omegas = OmegaSet::compute(&weights).unwrap();
    Tiny { weights, omegas }
}

/// IOI prompts with ids folded into the tiny model's vocabulary. Roles and
/// positions are unchanged.
pub fn tiny_prompts(n: usize, seed: u64) -> Vec<IoiPrompt> {
    let mut ds = generate_dataset(&vocab(), &IoiAssets::bundled().unwrap(), seed, n).unwrap();
    for p in &mut ds {
        for id in &mut p.ids {
            *id %= 1024;
        }
        p.io_id %= 1024;
        p.s_id %= 1024;
    }
    ds
}
