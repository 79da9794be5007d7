// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2 byte-level BPE tokenizer.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Pre-tokenization pattern used by GPT-2.
pub const PRETOKENIZE_PATTERN: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// Vocabulary, merge table and byte mapping of a byte-level BPE model.
#[derive(Debug, Clone)]
pub struct BpeVocab {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pattern: Regex,
}

/// The reversible byte -> printable char table of GPT-2.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
    let mut n = 0u32;
    for b in 0u32..256 {
        let cp = if printable(b) {
            b
        } else {
            n += 1;
            255 + n
        };
        table[b as usize] = char::from_u32(cp).expect("valid code point");
    }
    table
}

impl BpeVocab {
    pub fn load(vocab_path: impl AsRef<Path>, merges_path: impl AsRef<Path>) -> Result<Self> {
        let vp = vocab_path.as_ref();
        let mp = merges_path.as_ref();
        let vocab = std::fs::read_to_string(vp).map_err(|e| Error::io(vp, e))?;
        let merges = std::fs::read_to_string(mp).map_err(|e| Error::io(mp, e))?;
        Self::from_strs(&vocab, &merges)
    }

    /// Builds the tokenizer from the contents of `vocab.json` and `merges.txt`.
    pub fn from_strs(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let token_to_id: HashMap<String, TokenId> =
            serde_json::from_str(vocab_json).map_err(|e| Error::Vocab(format!("vocab.json: {e}")))?;
        let mut id_to_token = vec![None; token_to_id.len()];
        for (tok, &id) in &token_to_id {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| Error::Vocab(format!("id {id} for {tok:?} is not dense")))?;
            if slot.is_some() {
                return Err(Error::Vocab(format!("id {id} assigned twice")));
            }
            *slot = Some(tok.clone());
        }
        let id_to_token: Vec<String> = id_to_token.into_iter().map(|t| t.expect("dense ids")).collect();

        let mut merge_ranks = HashMap::new();
        for (lineno, line) in merges_txt.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => {
                    let rank = merge_ranks.len();
                    merge_ranks.entry((a.to_string(), b.to_string())).or_insert(rank);
                }
                _ => return Err(Error::Vocab(format!("merges line {}: {line:?}", lineno + 1))),
            }
        }

        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let pattern = Regex::new(PRETOKENIZE_PATTERN).expect("static pattern compiles");
        Ok(Self {
            token_to_id,
            id_to_token,
            merge_ranks,
            byte_encoder,
            byte_decoder,
            pattern,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn n_merges(&self) -> usize {
        self.merge_ranks.len()
    }

    /// Byte-level string form of a token id (e.g. `"ĠMary"`).
    pub fn token_str(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for piece in self.pattern.find_iter(text) {
            // The pattern cannot hit its backtrack limit on this grammar.
            let piece = piece.expect("pre-tokenizer regex");
            let mapped: String = piece.as_str().bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for sym in self.bpe(&mapped) {
                match self.token_to_id.get(&sym) {
                    Some(&id) => out.push(id),
                    // Every single byte is in the vocabulary, so an unknown
                    // merged symbol means the files disagree; fall back to bytes.
                    None => out.extend(sym.chars().map(|c| self.token_to_id[&c.to_string()])),
                }
            }
        }
        out
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self
                .token_str(id)
                .ok_or_else(|| Error::Vocab(format!("token id {id} out of range (vocab size {})", self.len())))?;
            for c in tok.chars() {
                let b = self
                    .byte_decoder
                    .get(&c)
                    .ok_or_else(|| Error::Vocab(format!("token {id} contains unmapped char {c:?}")))?;
                bytes.push(*b);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Id of `text` if it encodes to exactly one token.
    pub fn single_token(&self, text: &str) -> Option<TokenId> {
        match self.encode(text).as_slice() {
            [id] => Some(*id),
            _ => None,
        }
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                .min_by_key(|(r, _)| *r);
            let Some((_, pair)) = best else { break };
            let (a, b) = (pair[0].clone(), pair[1].clone());
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            syms = merged;
        }
        syms
    }
}
