// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("contract violated in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("failed to load weights: tensor `{tensor}`: {detail}")]
    Load { tensor: String, detail: String },

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("index out of range: {0}")]
    Range(String),

    #[error("score consistency check failed for head ({layer},{head}) pair ({dest},{src}): decomposed {decomposed} vs captured {captured}")]
    Consistency {
        layer: usize,
        head: usize,
        dest: usize,
        src: usize,
        decomposed: f64,
        captured: f64,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
