// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge interventions: ablating or boosting the signal an upstream head
//! sends to a downstream head, globally or locally, with random-subspace
//! baselines.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ioi::IoiPrompt;
use crate::linalg::{dot, norm, SubspaceProjector};
use crate::model::{logit_diff, FoldedWeights, HeadId, HookScope, HookSign, HookSite, HookSpec, LogitRows, RunCapture};
use crate::omega::{extend_zero, OmegaSet, OmegaSvd};
use crate::stats::{median, spearman};
use crate::tokenizer::TokenId;
use crate::trace::{signal_for, EdgeKey, EdgeRecord, Side, SliceMode, TraceEdge};

/// Number of random-basis seeds reported by default.
pub const DEFAULT_RANDOM_SEEDS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// At the upstream head's output.
    Global,
    /// At the downstream head's normalized input.
    Local,
    /// At the normalized input of every head in the downstream layer.
    LocalLayerwide,
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::Global => "global",
            Site::Local => "local",
            Site::LocalLayerwide => "local_layerwide",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Ablate,
    Boost,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Ablate => "ablate",
            Direction::Boost => "boost",
        }
    }

    fn sign(self) -> HookSign {
        match self {
            Direction::Ablate => HookSign::Subtract,
            Direction::Boost => HookSign::Add,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Basis {
    Signal,
    /// `|S|` active slices outside `S`, drawn with this seed.
    Random {
        seed: u64,
    },
}

impl Basis {
    pub fn label(self) -> String {
        match self {
            Basis::Signal => "signal".into(),
            Basis::Random { seed } => format!("random:{seed}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub edge: EdgeKey,
    pub site: Site,
    pub direction: Direction,
    pub basis: Basis,
}

/// One intervened prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub prompt: usize,
    /// First edge of the group; the only one for single-edge runs.
    pub edge: EdgeKey,
    pub n_edges: usize,
    pub dest: usize,
    pub src: usize,
    pub site: Site,
    pub direction: Direction,
    pub basis: Basis,
    /// `F(X, e, h) - F(X)` with `F` the IO minus S logit difference.
    pub delta_f: f64,
    /// Change of the downstream pre-softmax score, averaged over edges.
    pub delta_attn_score: f64,
    /// Cosine between the intervened vector before and after, averaged.
    pub cosine_sim: f64,
    /// `|x + h| / |x|`, averaged.
    pub norm_ratio: f64,
    pub signal_size: usize,
    pub basis_size: usize,
    /// Random slices missing because the complement was too small.
    pub shortfall: usize,
}

/// The data needed to intervene on one prompt.
#[derive(Debug, Clone, Copy)]
pub struct PromptCase<'a> {
    pub index: usize,
    pub ids: &'a [TokenId],
    pub io_id: TokenId,
    pub s_id: TokenId,
    /// This prompt's trace records.
    pub records: &'a [EdgeRecord],
}

impl<'a> PromptCase<'a> {
    pub fn from_prompt(p: &'a IoiPrompt, records: &'a [EdgeRecord]) -> Self {
        Self {
            index: p.index,
            ids: &p.ids,
            io_id: p.io_id,
            s_id: p.s_id,
            records,
        }
    }
}

/// Concrete `(dest, src)` of `key` in one prompt: the highest-valued
/// matching record.
pub fn find_instance(records: &[EdgeRecord], key: &EdgeKey) -> Option<(usize, usize)> {
    records
        .iter()
        .filter(|r| {
            r.upstream == key.upstream
                && r.downstream == key.downstream
                && r.side == key.side
                && r.dest_role == key.dest_role
                && r.src_role == key.src_role
        })
        .max_by(|a, b| a.value.total_cmp(&b.value))
        .map(|r| (r.dest, r.src))
}

/// Slice indices for `basis`, plus the shortfall of a random draw.
///
/// The random set has `|S|` active slices outside `S`, or the whole active
/// complement when that is smaller. The stream is keyed by prompt so each
/// prompt draws independently but reproducibly.
pub fn basis_indices(svd: &OmegaSvd, signal: &[usize], basis: Basis, prompt: usize) -> (Vec<usize>, usize) {
    match basis {
        Basis::Signal => (signal.to_vec(), 0),
        Basis::Random { seed } => {
            let complement: Vec<usize> = (0..svd.rank())
                .filter(|k| svd.is_active(*k) && !signal.contains(k))
                .collect();
            let want = signal.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(prompt as u64);
            let mut pick: Vec<usize> = complement.choose_multiple(&mut rng, want).copied().collect();
            pick.sort_unstable();
            let short = want - pick.len();
            (pick, short)
        }
    }
}

/// `drop_last(P [o; 0])` with `P` spanned by the `u` (dest side) or `v`
/// (src side) vectors of `indices`.
pub fn build_delta(svd: &OmegaSvd, o: &[f64], side: Side, indices: &[usize]) -> Vec<f64> {
    let basis: Vec<Vec<f64>> = indices
        .iter()
        .map(|&k| match side {
            Side::Dest => svd.u[k].clone(),
            Side::Src => svd.v[k].clone(),
        })
        .collect();
    let p = SubspaceProjector::from_orthonormal(svd.dim(), basis);
    let mut d = p.apply(&extend_zero(o));
    d.pop();
    d
}

struct PlannedHook {
    hook: HookSpec,
    downstream: HeadId,
    dest: usize,
    src: usize,
    token: usize,
    signal_size: usize,
    basis_size: usize,
    shortfall: usize,
}

fn plan(
    base: &RunCapture,
    omegas: &OmegaSet,
    spec: &InterventionSpec,
    dest: usize,
    src: usize,
    prompt: usize,
) -> Result<PlannedHook> {
    let key = spec.edge;
    if key.upstream.layer >= key.downstream.layer {
        return Err(Error::Contract {
            op: "intervene",
            detail: format!("edge {key} is not layer-increasing"),
        });
    }
    let svd = omegas.get(key.downstream);
    let signal = signal_for(base, svd, dest, src, SliceMode::Signal)?;
    let (indices, shortfall) = basis_indices(svd, &signal.indices, spec.basis, prompt);
    let token = match key.side {
        Side::Dest => dest,
        Side::Src => src,
    };
    let o = base.head(key.upstream).output.row(token);
    let delta = build_delta(svd, o, key.side, &indices);
    let (site, layer, head, scope) = match spec.site {
        Site::Global => (
            HookSite::UpstreamHeadOutput,
            key.upstream.layer,
            key.upstream.head,
            HookScope::SingleHead,
        ),
        Site::Local => (
            HookSite::DownstreamHeadInput,
            key.downstream.layer,
            key.downstream.head,
            HookScope::SingleHead,
        ),
        Site::LocalLayerwide => (
            HookSite::DownstreamHeadInput,
            key.downstream.layer,
            key.downstream.head,
            HookScope::WholeLayer,
        ),
    };
    Ok(PlannedHook {
        hook: HookSpec {
            site,
            layer,
            head,
            token,
            delta,
            sign: spec.direction.sign(),
            scope,
        },
        downstream: key.downstream,
        dest,
        src,
        token,
        signal_size: signal.len(),
        basis_size: indices.len(),
        shortfall,
    })
}

/// The vector the magnitude metrics compare: the downstream head's input
/// for local sites, the residual entering the downstream layer for global.
fn observed<'c>(cap: &'c RunCapture, site: Site, h: HeadId, token: usize) -> &'c [f64] {
    match site {
        Site::Global => cap.layers[h.layer].residual_in.row(token),
        Site::Local | Site::LocalLayerwide => cap.head_input(h).row(token),
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

fn ratio(after: &[f64], before: &[f64]) -> f64 {
    let nb = norm(before);
    if nb == 0.0 {
        1.0
    } else {
        norm(after) / nb
    }
}

/// Applies every edge of `group` present in the prompt in one forward pass.
/// Returns `None` when none of them occurs. All specs must share site,
/// direction and basis.
pub fn intervene_prompt(
    weights: &FoldedWeights,
    omegas: &OmegaSet,
    base: &RunCapture,
    case: &PromptCase<'_>,
    group: &[InterventionSpec],
) -> Result<Option<InterventionReport>> {
    let Some(first) = group.first() else {
        return Ok(None);
    };
    if group
        .iter()
        .any(|s| s.site != first.site || s.direction != first.direction || s.basis != first.basis)
    {
        return Err(Error::Contract {
            op: "multi_edge",
            detail: "specs must share site, direction and basis".into(),
        });
    }
    let mut planned = Vec::new();
    let mut lead = None;
    for spec in group {
        if let Some((dest, src)) = find_instance(case.records, &spec.edge) {
            lead.get_or_insert(spec.edge);
            planned.push(plan(base, omegas, spec, dest, src, case.index)?);
        }
    }
    let Some(lead) = lead else {
        return Ok(None);
    };
    let hooks: Vec<HookSpec> = planned.iter().map(|p| p.hook.clone()).collect();
    let hooked = weights.forward_with(case.ids, &hooks, LogitRows::Last)?;
    let n = planned.len() as f64;
    let mut d_score = 0.0;
    let mut cos = 0.0;
    let mut nr = 0.0;
    for p in &planned {
        d_score += hooked.head(p.downstream).score(p.dest, p.src) - base.head(p.downstream).score(p.dest, p.src);
        let before = observed(base, first.site, p.downstream, p.token);
        let after = observed(&hooked, first.site, p.downstream, p.token);
        cos += cosine(before, after);
        nr += ratio(after, before);
    }
    Ok(Some(InterventionReport {
        prompt: case.index,
        edge: lead,
        n_edges: planned.len(),
        dest: planned[0].dest,
        src: planned[0].src,
        site: first.site,
        direction: first.direction,
        basis: first.basis,
        delta_f: logit_diff(&hooked, case.io_id, case.s_id) - logit_diff(base, case.io_id, case.s_id),
        delta_attn_score: d_score / n,
        cosine_sim: cos / n,
        norm_ratio: nr / n,
        signal_size: planned.iter().map(|p| p.signal_size).sum(),
        basis_size: planned.iter().map(|p| p.basis_size).sum(),
        shortfall: planned.iter().map(|p| p.shortfall).sum(),
    }))
}

/// Runs every group on every prompt; one clean forward pass per prompt is
/// shared by all groups. `out[g]` lists the reports of group `g`.
pub fn run_groups(
    weights: &FoldedWeights,
    omegas: &OmegaSet,
    cases: &[PromptCase<'_>],
    groups: &[Vec<InterventionSpec>],
) -> Result<Vec<Vec<InterventionReport>>> {
    let per_prompt: Vec<Vec<Option<InterventionReport>>> = cases
        .par_iter()
        .map(|case| -> Result<Vec<Option<InterventionReport>>> {
            let wanted = groups
                .iter()
                .any(|g| g.iter().any(|s| find_instance(case.records, &s.edge).is_some()));
            if !wanted {
                return Ok(vec![None; groups.len()]);
            }
            let base = weights.forward(case.ids, &[])?;
            groups
                .iter()
                .map(|g| intervene_prompt(weights, omegas, &base, case, g))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); groups.len()];
    for row in per_prompt {
        for (g, r) in row.into_iter().enumerate() {
            if let Some(r) = r {
                out[g].push(r);
            }
        }
    }
    Ok(out)
}

/// Single-edge intervention on every prompt where the edge occurs.
pub fn apply(
    weights: &FoldedWeights,
    omegas: &OmegaSet,
    spec: &InterventionSpec,
    cases: &[PromptCase<'_>],
) -> Result<Vec<InterventionReport>> {
    Ok(run_groups(weights, omegas, cases, &[vec![*spec]])?.remove(0))
}

/// All specs applied jointly, one report per prompt where any occurs.
pub fn multi_edge(
    weights: &FoldedWeights,
    omegas: &OmegaSet,
    specs: &[InterventionSpec],
    cases: &[PromptCase<'_>],
) -> Result<Vec<InterventionReport>> {
    Ok(run_groups(weights, omegas, cases, &[specs.to_vec()])?.remove(0))
}

/// Median metrics of one set of reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub median_delta_f: Option<f64>,
    pub median_delta_attn_score: Option<f64>,
    pub median_cosine_sim: Option<f64>,
    pub median_norm_ratio: Option<f64>,
}

pub fn summarize(reports: &[InterventionReport]) -> Summary {
    let col = |f: fn(&InterventionReport) -> f64| median(&reports.iter().map(f).collect::<Vec<_>>());
    Summary {
        n: reports.len(),
        median_delta_f: col(|r| r.delta_f),
        median_delta_attn_score: col(|r| r.delta_attn_score),
        median_cosine_sim: col(|r| r.cosine_sim),
        median_norm_ratio: col(|r| r.norm_ratio),
    }
}

/// Per-edge effect of ablation, in order of increasing edge weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeEffect {
    pub edge: EdgeKey,
    pub weight: f64,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectProfile {
    pub site: Site,
    pub effects: Vec<EdgeEffect>,
    /// Rank correlation of edge weight with `|median delta_attn_score|`.
    pub weight_score_spearman: Option<f64>,
}

pub fn edge_effect_profile(
    weights: &FoldedWeights,
    omegas: &OmegaSet,
    edges: &[TraceEdge],
    site: Site,
    cases: &[PromptCase<'_>],
) -> Result<EffectProfile> {
    let mut sorted = edges.to_vec();
    sorted.sort_by(|a, b| a.weight.total_cmp(&b.weight).then(a.key.cmp(&b.key)));
    let groups: Vec<Vec<InterventionSpec>> = sorted
        .iter()
        .map(|e| {
            vec![InterventionSpec {
                edge: e.key,
                site,
                direction: Direction::Ablate,
                basis: Basis::Signal,
            }]
        })
        .collect();
    let reports = run_groups(weights, omegas, cases, &groups)?;
    let effects: Vec<EdgeEffect> = sorted
        .iter()
        .zip(&reports)
        .map(|(e, r)| EdgeEffect {
            edge: e.key,
            weight: e.weight,
            summary: summarize(r),
        })
        .collect();
    let (w, s): (Vec<f64>, Vec<f64>) = effects
        .iter()
        .filter_map(|e| e.summary.median_delta_attn_score.map(|m| (e.weight, m.abs())))
        .unzip();
    Ok(EffectProfile {
        site,
        effects,
        weight_score_spearman: spearman(&w, &s),
    })
}

pub const CSV_HEADER: &str = "prompt,upstream,downstream,dest_role,src_role,side,n_edges,dest,src,site,direction,basis,delta_f,delta_attn_score,cosine_sim,norm_ratio,signal_size,basis_size,shortfall";

/// One CSV row per report, with header.
pub fn to_csv(reports: &[InterventionReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{}_{},{}_{},{},{},{},{},{},{},{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{},{},{}",
            r.prompt,
            r.edge.upstream.layer,
            r.edge.upstream.head,
            r.edge.downstream.layer,
            r.edge.downstream.head,
            r.edge.dest_role,
            r.edge.src_role,
            r.edge.side.as_str(),
            r.n_edges,
            r.dest,
            r.src,
            r.site.as_str(),
            r.direction.as_str(),
            r.basis.label(),
            r.delta_f,
            r.delta_attn_score,
            r.cosine_sim,
            r.norm_ratio,
            r.signal_size,
            r.basis_size,
            r.shortfall
        );
    }
    s
}
