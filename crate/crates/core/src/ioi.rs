// SPDX-License-Identifier: MIT OR Apache-2.0

//! Indirect object identification prompts.
//!
//! Template syntax: `{A}` is the indirect object, `{B}` the subject,
//! `{PLACE}` and `{OBJECT}` are filled from word lists. A word prefixed with
//! `^` is the verb role and one prefixed with `~` the preposition role.
//! Templates are written in ABBA order; the BABA variant swaps the first
//! two name slots. Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HeadId;
use crate::tokenizer::{BpeVocab, TokenId};

pub const TEMPLATES: &str = include_str!("../../../data/ioi/templates.txt");
pub const NAMES: &str = include_str!("../../../data/ioi/names.txt");
pub const PLACES: &str = include_str!("../../../data/ioi/places.txt");
pub const OBJECTS: &str = include_str!("../../../data/ioi/objects.txt");
pub const REFERENCE_HEADS: &str = include_str!("../../../data/ioi/reference_heads.json");

pub const MIN_PROMPT_TOKENS: usize = 14;
pub const MAX_PROMPT_TOKENS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pattern {
    #[serde(rename = "ABBA")]
    Abba,
    #[serde(rename = "BABA")]
    Baba,
}

/// Token role used to aggregate positions across prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "IO")]
    Io,
    #[serde(rename = "S1")]
    S1,
    /// The token right after the first subject mention.
    #[serde(rename = "S1+1")]
    S1Next,
    #[serde(rename = "S2")]
    S2,
    #[serde(rename = "end")]
    End,
    #[serde(rename = "verb")]
    Verb,
    #[serde(rename = "prep")]
    Prep,
    #[serde(rename = "other")]
    Other,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::Io,
        Role::S1,
        Role::S1Next,
        Role::S2,
        Role::End,
        Role::Verb,
        Role::Prep,
        Role::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Io => "IO",
            Role::S1 => "S1",
            Role::S1Next => "S1+1",
            Role::S2 => "S2",
            Role::End => "end",
            Role::Verb => "verb",
            Role::Prep => "prep",
            Role::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.as_str().eq_ignore_ascii_case(s))
    }

    pub fn is_name(self) -> bool {
        matches!(self, Role::Io | Role::S1 | Role::S2)
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Role positions inside one prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    pub io: usize,
    pub s1: usize,
    pub s2: usize,
    pub end: usize,
    pub verb: usize,
    pub prep: usize,
}

impl Roles {
    /// Role of a token position; the named roles take precedence in the
    /// order IO, S1, S2, end, verb, prep, S1+1.
    pub fn role_of(&self, pos: usize) -> Role {
        if pos == self.io {
            Role::Io
        } else if pos == self.s1 {
            Role::S1
        } else if pos == self.s2 {
            Role::S2
        } else if pos == self.end {
            Role::End
        } else if pos == self.verb {
            Role::Verb
        } else if pos == self.prep {
            Role::Prep
        } else if pos == self.s1 + 1 {
            Role::S1Next
        } else {
            Role::Other
        }
    }

    /// First position carrying `role`, if any.
    pub fn position(&self, role: Role) -> Option<usize> {
        match role {
            Role::Io => Some(self.io),
            Role::S1 => Some(self.s1),
            Role::S1Next => Some(self.s1 + 1),
            Role::S2 => Some(self.s2),
            Role::End => Some(self.end),
            Role::Verb => Some(self.verb),
            Role::Prep => Some(self.prep),
            Role::Other => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoiPrompt {
    pub index: usize,
    pub text: String,
    pub ids: Vec<TokenId>,
    pub pattern: Pattern,
    pub template_id: usize,
    pub roles: Roles,
    pub io_name: String,
    pub s_name: String,
    pub io_id: TokenId,
    pub s_id: TokenId,
}

impl IoiPrompt {
    pub fn role_of(&self, pos: usize) -> Role {
        self.roles.role_of(pos)
    }
}

/// Parsed template: a list of literal text and slot pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub id: usize,
    pieces: Vec<Piece>,
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Text(String),
    NameA,
    NameB,
    Place,
    Object,
    Verb(String),
    Prep(String),
}

impl Template {
    pub fn parse(id: usize, line: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut text = String::new();
        let mut rest = line;
        while !rest.is_empty() {
            if let Some(r) = rest.strip_prefix('{') {
                let end = r
                    .find('}')
                    .ok_or_else(|| Error::Dataset(format!("template {id}: unclosed slot")))?;
                let slot = &r[..end];
                if !text.is_empty() {
                    pieces.push(Piece::Text(std::mem::take(&mut text)));
                }
                pieces.push(match slot {
                    "A" => Piece::NameA,
                    "B" => Piece::NameB,
                    "PLACE" => Piece::Place,
                    "OBJECT" => Piece::Object,
                    other => return Err(Error::Dataset(format!("template {id}: unknown slot {{{other}}}"))),
                });
                rest = &r[end + 1..];
            } else if let Some(marker) = rest.chars().next().filter(|c| *c == '^' || *c == '~') {
                let r = &rest[1..];
                let end = r.find(|c: char| !c.is_alphanumeric()).unwrap_or(r.len());
                if end == 0 {
                    return Err(Error::Dataset(format!("template {id}: empty {marker} marker")));
                }
                if !text.is_empty() {
                    pieces.push(Piece::Text(std::mem::take(&mut text)));
                }
                let word = r[..end].to_string();
                pieces.push(if marker == '^' {
                    Piece::Verb(word)
                } else {
                    Piece::Prep(word)
                });
                rest = &r[end..];
            } else {
                let c = rest.chars().next().expect("non-empty");
                text.push(c);
                rest = &rest[c.len_utf8()..];
            }
        }
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }
        let count = |p: &Piece| pieces.iter().filter(|q| *q == p).count();
        if count(&Piece::NameA) != 1 || count(&Piece::NameB) != 2 {
            return Err(Error::Dataset(format!(
                "template {id}: needs one {{A}} and two {{B}} slots"
            )));
        }
        if !pieces.iter().any(|p| matches!(p, Piece::Verb(_))) || !pieces.iter().any(|p| matches!(p, Piece::Prep(_))) {
            return Err(Error::Dataset(format!("template {id}: needs ^verb and ~prep markers")));
        }
        Ok(Self { id, pieces })
    }

    /// Template text with markers removed and slots left as `{A}` etc.
    pub fn display(&self) -> String {
        self.pieces
            .iter()
            .map(|p| match p {
                Piece::Text(t) => t.clone(),
                Piece::NameA => "{A}".into(),
                Piece::NameB => "{B}".into(),
                Piece::Place => "{PLACE}".into(),
                Piece::Object => "{OBJECT}".into(),
                Piece::Verb(w) | Piece::Prep(w) => w.clone(),
            })
            .collect()
    }

    /// Fills the template and annotates role positions.
    pub fn instantiate(
        &self,
        vocab: &BpeVocab,
        pattern: Pattern,
        io: &str,
        s: &str,
        place: &str,
        object: &str,
    ) -> Result<(String, Vec<TokenId>, Roles)> {
        // slot-start offsets (byte index of the preceding space) per role
        let mut text = String::new();
        let mut name_marks: Vec<(bool, usize)> = Vec::new(); // (is_io, offset)
        let mut verb_at = None;
        let mut prep_at = None;
        for p in &self.pieces {
            match p {
                Piece::Text(t) => text.push_str(t),
                Piece::NameA | Piece::NameB => {
                    // In BABA the first mention swaps A and B.
                    let mut is_a = matches!(p, Piece::NameA);
                    if pattern == Pattern::Baba && name_marks.len() < 2 {
                        is_a = !is_a;
                    }
                    name_marks.push((is_a, text.len()));
                    text.push_str(if is_a { io } else { s });
                }
                Piece::Place => text.push_str(place),
                Piece::Object => text.push_str(object),
                Piece::Verb(w) => {
                    verb_at = Some(text.len());
                    text.push_str(w);
                }
                Piece::Prep(w) => {
                    prep_at = Some(text.len());
                    text.push_str(w);
                }
            }
        }
        let ids = vocab.encode(&text);
        let pos_of = |offset: usize| -> Result<usize> {
            let before = &text[..offset];
            let trimmed = before.strip_suffix(' ').ok_or_else(|| {
                Error::Dataset(format!(
                    "template {}: slot at byte {offset} is not preceded by a space",
                    self.id
                ))
            })?;
            Ok(vocab.encode(trimmed).len())
        };
        let mut io_pos = None;
        let mut s_pos = Vec::new();
        for &(is_io, off) in &name_marks {
            let p = pos_of(off)?;
            let want = vocab
                .single_token(&format!(" {}", if is_io { io } else { s }))
                .ok_or_else(|| {
                    Error::Dataset(format!("name {:?} is not a single token", if is_io { io } else { s }))
                })?;
            if ids.get(p) != Some(&want) {
                return Err(Error::Dataset(format!(
                    "template {}: name slot did not land on one token",
                    self.id
                )));
            }
            if is_io {
                io_pos = Some(p);
            } else {
                s_pos.push(p);
            }
        }
        let (Some(io_pos), [s1, s2]) = (io_pos, s_pos.as_slice()) else {
            return Err(Error::Dataset(format!("template {}: bad name layout", self.id)));
        };
        let verb = pos_of(verb_at.expect("checked at parse"))?;
        let prep = pos_of(prep_at.expect("checked at parse"))?;
        let roles = Roles {
            io: io_pos,
            s1: *s1,
            s2: *s2,
            end: ids.len() - 1,
            verb,
            prep,
        };
        Ok((text, ids, roles))
    }
}

fn word_list(src: &str) -> Vec<String> {
    src.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

/// Templates, names, places and objects.
#[derive(Debug, Clone)]
pub struct IoiAssets {
    pub templates: Vec<Template>,
    pub names: Vec<String>,
    pub places: Vec<String>,
    pub objects: Vec<String>,
}

impl IoiAssets {
    /// The assets shipped with the crate.
    pub fn bundled() -> Result<Self> {
        Self::from_strs(TEMPLATES, NAMES, PLACES, OBJECTS)
    }

    pub fn from_strs(templates: &str, names: &str, places: &str, objects: &str) -> Result<Self> {
        let templates = word_list(templates)
            .iter()
            .enumerate()
            .map(|(i, l)| Template::parse(i, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            templates,
            names: word_list(names),
            places: word_list(places),
            objects: word_list(objects),
        })
    }

    /// Checks that every name, place and object is a single token when
    /// preceded by a space.
    pub fn validate(&self, vocab: &BpeVocab) -> Result<()> {
        for w in self.names.iter().chain(&self.places).chain(&self.objects) {
            if vocab.single_token(&format!(" {w}")).is_none() {
                return Err(Error::Dataset(format!(
                    "{w:?} is not a single token with a leading space"
                )));
            }
        }
        if self.names.len() < 2 || self.places.is_empty() || self.objects.is_empty() || self.templates.is_empty() {
            return Err(Error::Dataset("word lists too small".into()));
        }
        Ok(())
    }
}

/// Deterministic dataset of `n` prompts.
///
/// Indirect-object names cycle through a shuffled copy of the name pool, so
/// the pool is covered before any name repeats. Subjects are drawn uniformly
/// among the other names. Templates cycle in order and patterns alternate.
pub fn generate_dataset(vocab: &BpeVocab, assets: &IoiAssets, seed: u64, n: usize) -> Result<Vec<IoiPrompt>> {
    assets.validate(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..assets.names.len()).collect();
    pool.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n);
    for index in 0..n {
        let t = &assets.templates[index % assets.templates.len()];
        let pattern = if (index / assets.templates.len()) % 2 == 0 {
            if index % 2 == 0 {
                Pattern::Abba
            } else {
                Pattern::Baba
            }
        } else if index % 2 == 0 {
            Pattern::Baba
        } else {
            Pattern::Abba
        };
        let io_idx = pool[index % pool.len()];
        if index % pool.len() == pool.len() - 1 {
            pool.shuffle(&mut rng);
        }
        let mut s_idx = rng.gen_range(0..assets.names.len() - 1);
        if s_idx >= io_idx {
            s_idx += 1;
        }
        let place = &assets.places[rng.gen_range(0..assets.places.len())];
        let object = &assets.objects[rng.gen_range(0..assets.objects.len())];
        let io = &assets.names[io_idx];
        let s = &assets.names[s_idx];
        let (text, ids, roles) = t.instantiate(vocab, pattern, io, s, place, object)?;
        if !(MIN_PROMPT_TOKENS..=MAX_PROMPT_TOKENS).contains(&ids.len()) {
            return Err(Error::Dataset(format!(
                "template {} produced {} tokens, outside {MIN_PROMPT_TOKENS}..={MAX_PROMPT_TOKENS}",
                t.id,
                ids.len()
            )));
        }
        let io_id = vocab.single_token(&format!(" {io}")).expect("validated");
        let s_id = vocab.single_token(&format!(" {s}")).expect("validated");
        out.push(IoiPrompt {
            index,
            text,
            ids,
            pattern,
            template_id: t.id,
            roles,
            io_name: io.clone(),
            s_name: s.clone(),
            io_id,
            s_id,
        });
    }
    Ok(out)
}

/// Writes one JSON object per prompt.
pub fn write_jsonl(prompts: &[IoiPrompt], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for p in prompts {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// The reference circuit heads, grouped by function.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceHeads {
    #[serde(default)]
    pub description: String,
    pub heads: BTreeMap<String, Vec<(usize, usize)>>,
}

impl ReferenceHeads {
    pub fn bundled() -> Self {
        serde_json::from_str(REFERENCE_HEADS).expect("bundled reference heads parse")
    }

    pub fn all(&self) -> Vec<HeadId> {
        let mut v: Vec<HeadId> = self.heads.values().flatten().map(|&(l, h)| HeadId::new(l, h)).collect();
        v.sort();
        v.dedup();
        v
    }
}
