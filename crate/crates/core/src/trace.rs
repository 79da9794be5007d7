// SPDX-License-Identifier: MIT OR Apache-2.0

//! Singular vector tracing: upstream contribution scores, the significance
//! rule, the recursive trace, and cross-prompt aggregation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decomp::{head_input_tilde, slice_contributions, SignalSet, FIRING_THRESHOLD};
use crate::error::{Error, Result};
use crate::ioi::{Role, Roles};
use crate::model::{HeadId, RunCapture};
use crate::omega::{extend_zero, OmegaSet, OmegaSvd};

/// Fraction of the positive contribution mass the selected heads must cover.
pub const SIGNIFICANCE: f64 = 0.70;
/// Edge occurrence threshold of the full graph, for 256 prompts.
pub const EDGE_MIN_OCCURRENCES: usize = 65;
/// Edge occurrence threshold of the skeleton, for 256 prompts.
pub const SKELETON_MIN_OCCURRENCES: usize = 170;
/// Prompt count the absolute thresholds refer to.
pub const REFERENCE_PROMPTS: usize = 256;

/// `ceil(threshold * n / 256)`, at least 1.
pub fn scaled_threshold(threshold: usize, n_prompts: usize) -> usize {
    ((threshold * n_prompts).div_ceil(REFERENCE_PROMPTS)).max(1)
}

/// Which token of the downstream pair an upstream head writes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Dest,
    Src,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Dest => "dest",
            Side::Src => "src",
        }
    }
}

/// Which slices carry the signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMode {
    /// The greedy signal set of each firing.
    Signal,
    /// Every slice above the singular-value cutoff (baseline).
    AllSlices,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub firing_threshold: f64,
    pub significance: f64,
    pub mode: SliceMode,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            firing_threshold: FIRING_THRESHOLD,
            significance: SIGNIFICANCE,
            mode: SliceMode::Signal,
        }
    }
}

/// Contribution of one upstream head to one downstream attention score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub downstream: HeadId,
    pub upstream: HeadId,
    pub dest: usize,
    pub src: usize,
    pub side: Side,
    pub value: f64,
}

impl Contribution {
    /// The token the upstream head writes to.
    pub fn token(&self) -> usize {
        match self.side {
            Side::Dest => self.dest,
            Side::Src => self.src,
        }
    }
}

/// `ln_scale * sum_{k in S} sqrt(sigma_k) (w_k . [o; 0])` with `w_k` the
/// oriented `u_k` (dest side) or `v_k` (src side).
pub fn contribution_value(svd: &OmegaSvd, signal: &SignalSet, o: &[f64], ln_scale: f64, side: Side) -> f64 {
    let ot = extend_zero(o);
    let mut s = 0.0;
    for &k in &signal.indices {
        let w = match side {
            Side::Dest => &svd.u[k],
            Side::Src => &svd.v[k],
        };
        s += svd.sigma[k].sqrt() * signal.signs[k] * crate::linalg::dot(w, &ot);
    }
    ln_scale * s
}

/// Contributions of every head in layers below `signal.head` through `side`.
pub fn upstream_contributions(
    capture: &RunCapture,
    svd: &OmegaSvd,
    signal: &SignalSet,
    side: Side,
) -> Vec<Contribution> {
    let down = signal.head;
    let t = match side {
        Side::Dest => signal.i,
        Side::Src => signal.j,
    };
    let scale = capture.ln_scale(down.layer, t);
    let mut out = Vec::new();
    for l in 0..down.layer {
        for (b, hc) in capture.layers[l].heads.iter().enumerate() {
            out.push(Contribution {
                downstream: down,
                upstream: HeadId::new(l, b),
                dest: signal.i,
                src: signal.j,
                side,
                value: contribution_value(svd, signal, hc.output.row(t), scale, side),
            });
        }
    }
    out
}

/// A writer into the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Embedding,
    Head(HeadId),
    AttnBias(usize),
    Mlp(usize),
}

/// Signal-weighted contribution of every residual writer below the
/// downstream layer, embedding and MLPs included. The values add up to
/// `sum_{k in S} sqrt(sigma_k) s_k (w_k . x~_t - w_k[d])`. Only head terms
/// ever become edges.
pub fn component_breakdown(
    capture: &RunCapture,
    svd: &OmegaSvd,
    signal: &SignalSet,
    side: Side,
) -> Vec<(Component, f64)> {
    let layer = signal.head.layer;
    let t = match side {
        Side::Dest => signal.i,
        Side::Src => signal.j,
    };
    let scale = capture.ln_scale(layer, t);
    let val = |o: &[f64]| contribution_value(svd, signal, o, scale, side);
    let mut out = vec![(Component::Embedding, val(capture.embed.row(t)))];
    for l in 0..layer {
        let lc = &capture.layers[l];
        for (b, hc) in lc.heads.iter().enumerate() {
            out.push((Component::Head(HeadId::new(l, b)), val(hc.output.row(t))));
        }
        out.push((Component::AttnBias(l), val(&lc.attn_bias)));
        out.push((Component::Mlp(l), val(lc.mlp_out.row(t))));
    }
    out
}

/// Smallest prefix of the positive contributions, sorted descending, whose
/// sum reaches `frac` of the total positive mass.
pub fn significant_upstream(contribs: &[Contribution], frac: f64) -> Vec<Contribution> {
    let mut pos: Vec<Contribution> = contribs.iter().copied().filter(|c| c.value > 0.0).collect();
    pos.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.upstream.cmp(&b.upstream)));
    let total: f64 = pos.iter().map(|c| c.value).sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let mut acc = 0.0;
    let mut n = 0;
    for c in &pos {
        acc += c.value;
        n += 1;
        if acc >= frac * total {
            break;
        }
    }
    pos.truncate(n);
    pos
}

/// One traced edge in one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub prompt: usize,
    pub downstream: HeadId,
    pub upstream: HeadId,
    pub dest: usize,
    pub src: usize,
    pub dest_role: Role,
    pub src_role: Role,
    pub side: Side,
    pub value: f64,
}

/// Signal set of `(head, i, j)` in the given mode.
pub fn signal_for(capture: &RunCapture, svd: &OmegaSvd, i: usize, j: usize, mode: SliceMode) -> Result<SignalSet> {
    let c = slice_contributions(capture, svd, i, j)?;
    let x_dest = head_input_tilde(capture, svd.head, i);
    Ok(match mode {
        SliceMode::Signal => SignalSet::new(svd, &c, &x_dest),
        SliceMode::AllSlices => {
            let all = (0..svd.rank()).filter(|&k| svd.is_active(k)).collect();
            SignalSet::from_indices(svd, i, j, all, &x_dest)
        }
    })
}

/// Recursive tracer over one captured prompt.
pub struct PromptTracer<'a> {
    capture: &'a RunCapture,
    omegas: &'a OmegaSet,
    cfg: TraceConfig,
    roles: Option<Roles>,
    prompt: usize,
    visited: HashSet<(HeadId, usize, usize)>,
    records: Vec<EdgeRecord>,
}

impl<'a> PromptTracer<'a> {
    pub fn new(
        capture: &'a RunCapture,
        omegas: &'a OmegaSet,
        cfg: TraceConfig,
        prompt: usize,
        roles: Option<Roles>,
    ) -> Self {
        Self {
            capture,
            omegas,
            cfg,
            roles,
            prompt,
            visited: HashSet::new(),
            records: Vec::new(),
        }
    }

    fn role(&self, pos: usize) -> Role {
        self.roles.map_or(Role::Other, |r| r.role_of(pos))
    }

    fn is_firing(&self, h: HeadId, dest: usize, src: usize) -> bool {
        self.capture.head(h).weight(dest, src) > self.cfg.firing_threshold
    }

    /// Expands the firing `(head, dest, src)` and everything upstream of it.
    /// Non-firing pairs and pairs with `src == 0` produce nothing.
    pub fn svt(&mut self, head: HeadId, dest: usize, src: usize) -> Result<()> {
        if head.layer >= self.omegas.n_layers || head.head >= self.omegas.n_heads {
            return Err(Error::Range(format!("head {head} outside the model")));
        }
        if dest >= self.capture.n_tokens() || src > dest {
            return Err(Error::Range(format!("token pair ({dest},{src}) invalid")));
        }
        if !self.is_firing(head, dest, src) || src == 0 {
            return Ok(());
        }
        if !self.visited.insert((head, dest, src)) {
            return Ok(());
        }
        let svd = self.omegas.get(head);
        let signal = signal_for(self.capture, svd, dest, src, self.cfg.mode)?;
        let (dest_role, src_role) = (self.role(dest), self.role(src));
        for side in [Side::Src, Side::Dest] {
            let contribs = upstream_contributions(self.capture, svd, &signal, side);
            for c in significant_upstream(&contribs, self.cfg.significance) {
                self.records.push(EdgeRecord {
                    prompt: self.prompt,
                    downstream: head,
                    upstream: c.upstream,
                    dest,
                    src,
                    dest_role,
                    src_role,
                    side,
                    value: c.value,
                });
                let up_dest = c.token();
                for up_src in 0..=up_dest {
                    self.svt(c.upstream, up_dest, up_src)?;
                }
            }
        }
        Ok(())
    }

    /// Starts the trace at every firing of `head` on token `dest`.
    pub fn start(&mut self, head: HeadId, dest: usize) -> Result<()> {
        for src in 0..=dest {
            self.svt(head, dest, src)?;
        }
        Ok(())
    }

    /// Firing triples expanded so far.
    pub fn expanded(&self) -> Vec<(HeadId, usize, usize)> {
        let mut v: Vec<_> = self.visited.iter().copied().collect();
        v.sort();
        v
    }

    pub fn into_records(self) -> Vec<EdgeRecord> {
        self.records
    }

    pub fn records(&self) -> &[EdgeRecord] {
        &self.records
    }
}

/// Per-prompt trace result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTrace {
    pub prompt: usize,
    pub records: Vec<EdgeRecord>,
    pub expanded: Vec<(HeadId, usize, usize)>,
}

/// Traces one prompt from `starts`, each on token `dest`.
pub fn trace_capture(
    capture: &RunCapture,
    omegas: &OmegaSet,
    cfg: TraceConfig,
    prompt: usize,
    roles: Option<Roles>,
    starts: &[HeadId],
    dest: usize,
) -> Result<PromptTrace> {
    let mut t = PromptTracer::new(capture, omegas, cfg, prompt, roles);
    for &h in starts {
        t.start(h, dest)?;
    }
    let expanded = t.expanded();
    Ok(PromptTrace {
        prompt,
        records: t.into_records(),
        expanded,
    })
}

/// Edge identity used for aggregation across prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeKey {
    pub upstream: HeadId,
    pub downstream: HeadId,
    pub dest_role: Role,
    pub src_role: Role,
    pub side: Side,
}

impl EdgeKey {
    /// Role of the token the upstream head writes to.
    pub fn written_role(&self) -> Role {
        match self.side {
            Side::Dest => self.dest_role,
            Side::Src => self.src_role,
        }
    }
}

impl std::fmt::Display for EdgeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} -> {} [{}] ({},{})",
            self.upstream,
            self.downstream,
            self.side.as_str(),
            self.dest_role,
            self.src_role
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEdge {
    #[serde(flatten)]
    pub key: EdgeKey,
    pub weight: f64,
    pub occurrences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub kind: String,
    pub layer: usize,
    pub head: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    /// Firing expansions per prompt.
    pub firing_frequency: f64,
}

/// Aggregated trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceGraph {
    pub prompt_count: usize,
    pub min_occurrences: usize,
    pub edges: Vec<TraceEdge>,
    /// Number of expanded firings per head, over all prompts.
    pub firing_counts: BTreeMap<HeadId, usize>,
}

/// Aggregates per-prompt traces by edge key. Occurrences count prompts,
/// not records; edges seen in fewer than `min_occurrences` prompts are
/// dropped.
pub fn accumulate(traces: &[PromptTrace], min_occurrences: usize) -> TraceGraph {
    let mut acc: BTreeMap<EdgeKey, (f64, BTreeSet<usize>)> = BTreeMap::new();
    let mut firing_counts: BTreeMap<HeadId, usize> = BTreeMap::new();
    for t in traces {
        for r in &t.records {
            let key = EdgeKey {
                upstream: r.upstream,
                downstream: r.downstream,
                dest_role: r.dest_role,
                src_role: r.src_role,
                side: r.side,
            };
            let e = acc.entry(key).or_insert((0.0, BTreeSet::new()));
            e.0 += r.value;
            e.1.insert(r.prompt);
        }
        for (h, _, _) in &t.expanded {
            *firing_counts.entry(*h).or_default() += 1;
        }
    }
    let mut edges: Vec<TraceEdge> = acc
        .into_iter()
        .filter(|(_, (_, p))| p.len() >= min_occurrences)
        .map(|(key, (weight, p))| TraceEdge {
            key,
            weight,
            occurrences: p.len(),
        })
        .collect();
    edges.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.key.cmp(&b.key)));
    TraceGraph {
        prompt_count: traces.len(),
        min_occurrences,
        edges,
        firing_counts,
    }
}

impl TraceGraph {
    /// Heads touched by at least one edge.
    pub fn heads(&self) -> BTreeSet<HeadId> {
        self.edges
            .iter()
            .flat_map(|e| [e.key.upstream, e.key.downstream])
            .collect()
    }

    /// Edges with at least `min` occurrences.
    pub fn filtered(&self, min: usize) -> TraceGraph {
        TraceGraph {
            prompt_count: self.prompt_count,
            min_occurrences: min.max(self.min_occurrences),
            edges: self.edges.iter().filter(|e| e.occurrences >= min).cloned().collect(),
            firing_counts: self.firing_counts.clone(),
        }
    }

    pub fn is_layer_monotone(&self) -> bool {
        self.edges.iter().all(|e| e.key.upstream.layer < e.key.downstream.layer)
    }

    fn freq(&self, h: HeadId) -> f64 {
        let c = self.firing_counts.get(&h).copied().unwrap_or(0);
        if self.prompt_count == 0 {
            0.0
        } else {
            c as f64 / self.prompt_count as f64
        }
    }

    pub fn nodes(&self) -> Vec<GraphNode> {
        let mut nodes: Vec<GraphNode> = self
            .heads()
            .into_iter()
            .map(|h| GraphNode {
                id: head_node_id(h),
                kind: "head".into(),
                layer: h.layer,
                head: h.head,
                role: None,
                firing_frequency: self.freq(h),
            })
            .collect();
        let dummies: BTreeSet<(HeadId, Role)> = self
            .edges
            .iter()
            .map(|e| (e.key.downstream, e.key.written_role()))
            .collect();
        for (h, r) in dummies {
            nodes.push(GraphNode {
                id: role_node_id(h, r),
                kind: "token".into(),
                layer: h.layer,
                head: h.head,
                role: Some(r),
                firing_frequency: self.freq(h),
            });
        }
        nodes
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "prompt_count": self.prompt_count,
            "min_occurrences": self.min_occurrences,
            "nodes": self.nodes(),
            "edges": self.edges,
            "firing_counts": self
                .firing_counts
                .iter()
                .map(|(h, c)| serde_json::json!({"layer": h.layer, "head": h.head, "count": c}))
                .collect::<Vec<_>>(),
        })
    }

    /// Graphviz rendering. Heads are ovals shaded by firing frequency,
    /// token roles are boxes; src edges are blue and dashed, dest edges red;
    /// pen width grows with accumulated weight.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph svt {\n  rankdir=BT;\n  node [fontname=\"Helvetica\"];\n");
        let max_w = self.edges.iter().map(|e| e.weight).fold(0.0f64, f64::max);
        for n in self.nodes() {
            let grey = (1.0 - n.firing_frequency.clamp(0.0, 1.0) * 0.7) * 255.0;
            let fill = format!("#{0:02x}{0:02x}{0:02x}", grey.round() as u8);
            match n.role {
                None => {
                    let _ = writeln!(
                        s,
                        "  \"{}\" [shape=oval, style=filled, fillcolor=\"{fill}\", label=\"({}, {})\"];",
                        n.id, n.layer, n.head
                    );
                }
                Some(r) => {
                    let _ = writeln!(
                        s,
                        "  \"{}\" [shape=box, style=filled, fillcolor=\"{fill}\", label=\"({}, {}) {}\"];",
                        n.id, n.layer, n.head, r
                    );
                    let _ = writeln!(
                        s,
                        "  \"{}\" -> \"{}\" [style=dotted, arrowhead=none];",
                        n.id,
                        head_node_id(HeadId::new(n.layer, n.head))
                    );
                }
            }
        }
        for e in &self.edges {
            let width = if max_w > 0.0 { 0.5 + 4.5 * e.weight / max_w } else { 1.0 };
            let (color, style) = match e.key.side {
                Side::Src => ("blue", "dashed"),
                Side::Dest => ("red", "solid"),
            };
            let _ = writeln!(
                s,
                "  \"{}\" -> \"{}\" [color={color}, style={style}, penwidth={width:.3}, label=\"{}\"];",
                head_node_id(e.key.upstream),
                role_node_id(e.key.downstream, e.key.written_role()),
                e.occurrences
            );
        }
        s.push_str("}\n");
        s
    }
}

fn head_node_id(h: HeadId) -> String {
    format!("h{}_{}", h.layer, h.head)
}

fn role_node_id(h: HeadId, r: Role) -> String {
    format!("h{}_{}_{}", h.layer, h.head, r.as_str().replace('+', "p"))
}

/// `(precision, recall)` of the graph's head set against `reference`.
pub fn score_against_reference(g: &TraceGraph, reference: &[HeadId]) -> (f64, f64) {
    let heads = g.heads();
    let refs: BTreeSet<HeadId> = reference.iter().copied().collect();
    let hit = heads.intersection(&refs).count() as f64;
    let precision = if heads.is_empty() {
        0.0
    } else {
        hit / heads.len() as f64
    };
    let recall = if refs.is_empty() { 0.0 } else { hit / refs.len() as f64 };
    (precision, recall)
}
