// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse attention-score decomposition and singular vector tracing for
//! GPT-2.

pub mod analysis;
pub mod decomp;
pub mod error;
pub mod intervene;
pub mod ioi;
pub mod linalg;
pub mod model;
pub mod omega;
pub mod stats;
pub mod tokenizer;
pub mod trace;

pub use error::{Error, Result};
