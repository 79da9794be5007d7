// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared plumbing for the acceptance suite: data locations, model loading
//! and the one-line verdict format.

use std::io::Write;
use std::path::PathBuf;

use svtrace::model::{load_weights, FoldedWeights};
use svtrace::tokenizer::BpeVocab;

/// Path under the workspace `data/` directory.
pub fn data(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

/// `SVT_WEIGHTS`, else `data/gpt2/model.safetensors`.
pub fn weights_path() -> PathBuf {
    std::env::var_os("SVT_WEIGHTS")
        .map(PathBuf::from)
        .unwrap_or_else(|| data("gpt2/model.safetensors"))
}

pub fn vocab() -> BpeVocab {
    BpeVocab::load(data("vocab.json"), data("merges.txt")).expect("bundled tokenizer files")
}

/// The small synthetic GPT-2 used when a check is model-independent.
pub fn tiny_weights() -> FoldedWeights {
    load_weights(data("fixtures/tiny_gpt2.safetensors"))
        .expect("bundled synthetic model")
        .weights
}

pub enum Outcome {
    Pass(String),
    Fail(String),
    /// A required input is missing.
    Blocked(String),
}

pub fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

/// Prints `ACCEPTANCE <PASS|FAIL|BLOCKED> <name>: <detail>` and panics
/// unless the outcome is a pass.
pub fn verdict(name: &str, o: Outcome) {
    let (tag, detail) = match &o {
        Outcome::Pass(d) => ("PASS", d),
        Outcome::Fail(d) => ("FAIL", d),
        Outcome::Blocked(d) => ("BLOCKED", d),
    };
    // written to the raw handle so the line survives the test harness's
    // output capture for passing tests too
    let _ = writeln!(std::io::stderr(), "ACCEPTANCE {tag} {name}: {detail}");
    if !matches!(o, Outcome::Pass(_)) {
        panic!("{name}: {tag}: {detail}");
    }
}
