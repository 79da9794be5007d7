// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset-level statistics built from per-prompt captures: slice-set
//! sparsity, per-head slice signatures, upstream contribution heatmaps and
//! the consensus value subspace of a head.
//!
//! Every accumulator consumes one capture at a time so a run never holds
//! more than one prompt's activations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decomp::{detect_firings_with, head_input_tilde, slice_contributions, SignalSet};
use crate::error::{Error, Result};
use crate::ioi::{Role, Roles};
use crate::linalg::{dot, Matrix};
use crate::model::{HeadId, ModelConfig, RunCapture};
use crate::omega::{extend_zero, OmegaSet};
use crate::stats::abs_entropy;
use crate::trace::{signal_for, upstream_contributions, Side, SliceMode};

/// Slice-set summary of one firing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiringSummary {
    pub head: HeadId,
    pub dest: usize,
    pub src: usize,
    pub weight: f64,
    pub signal: Vec<usize>,
    /// The largest signal term exceeds the sum of the other signal terms.
    pub single_dominant: bool,
}

fn single_dominant(terms: &[f64], signal: &[usize]) -> bool {
    let mut vals: Vec<f64> = signal.iter().map(|&k| terms[k]).collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    match vals.split_first() {
        Some((top, rest)) => *top > rest.iter().sum::<f64>(),
        None => false,
    }
}

/// Decomposes every firing of one capture. Each decomposition goes
/// through the score consistency check, so a folding error surfaces as
/// [`Error::Consistency`]. Firings on token 0 are skipped unless
/// `include_token0` is set.
pub fn summarize_firings(
    capture: &RunCapture,
    omegas: &OmegaSet,
    threshold: f64,
    include_token0: bool,
) -> Result<Vec<FiringSummary>> {
    let mut out = Vec::new();
    for ev in detect_firings_with(capture, threshold) {
        if ev.src == 0 && !include_token0 {
            continue;
        }
        let svd = omegas.get(ev.head);
        let c = slice_contributions(capture, svd, ev.dest, ev.src)?;
        let s = SignalSet::new(svd, &c, &head_input_tilde(capture, ev.head, ev.dest));
        out.push(FiringSummary {
            head: ev.head,
            dest: ev.dest,
            src: ev.src,
            weight: ev.weight,
            single_dominant: single_dominant(&c.terms, &s.indices),
            signal: s.indices,
        });
    }
    Ok(out)
}

/// Histogram of signal-set sizes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsityHistogram {
    pub counts: BTreeMap<usize, usize>,
}

impl SparsityHistogram {
    pub fn add(&mut self, size: usize) {
        *self.counts.entry(size).or_default() += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Lower median.
    pub fn median(&self) -> Option<usize> {
        let n = self.total();
        if n == 0 {
            return None;
        }
        let target = n.div_ceil(2);
        let mut acc = 0;
        for (&size, &c) in &self.counts {
            acc += c;
            if acc >= target {
                return Some(size);
            }
        }
        None
    }

    pub fn fraction_at_most(&self, k: usize) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        self.counts.range(..=k).map(|(_, c)| c).sum::<usize>() as f64 / n as f64
    }

    pub fn max(&self) -> Option<usize> {
        self.counts.keys().next_back().copied()
    }

    pub fn mean(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.counts.iter().map(|(s, c)| (s * c) as f64).sum::<f64>() / n as f64)
    }

    /// `size,count` rows for every size in `0..=max`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("size,count\n");
        if let Some(max) = self.max() {
            for k in 0..=max {
                let _ = writeln!(s, "{k},{}", self.counts.get(&k).copied().unwrap_or(0));
            }
        }
        s
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "firings": self.total(),
            "median": self.median(),
            "mean": self.mean(),
            "max": self.max(),
            "fraction_le_10": self.fraction_at_most(10),
            "fraction_le_20": self.fraction_at_most(20),
        })
    }
}

#[derive(Debug, Clone, Default)]
struct SetStats {
    events: usize,
    size_sum: usize,
    dominant: usize,
    slice_counts: BTreeMap<usize, usize>,
    set_counts: BTreeMap<Vec<usize>, usize>,
}

impl SetStats {
    fn add(&mut self, signal: &[usize], dominant: bool) {
        self.events += 1;
        self.size_sum += signal.len();
        self.dominant += dominant as usize;
        for &k in signal {
            *self.slice_counts.entry(k).or_default() += 1;
        }
        *self.set_counts.entry(signal.to_vec()).or_default() += 1;
    }

    /// Most frequent non-empty set; ties go to the smaller set in
    /// lexicographic order.
    fn top_set(&self) -> Option<Vec<usize>> {
        self.set_counts
            .iter()
            .filter(|(s, _)| !s.is_empty())
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(s, _)| s.clone())
    }

    fn core(&self, frac: f64) -> Vec<usize> {
        let need = frac * self.events as f64;
        self.slice_counts
            .iter()
            .filter(|(_, c)| **c as f64 >= need && self.events > 0)
            .map(|(k, _)| *k)
            .collect()
    }
}

/// Slice usage of one head in firing and non-firing mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSignature {
    pub head: HeadId,
    pub firings: usize,
    pub mean_size: Option<f64>,
    pub single_dominant_fraction: Option<f64>,
    /// Slices used in at least half of the firings.
    pub core: Vec<usize>,
    pub top_set: Option<Vec<usize>>,
    /// `(slice, count)` over firings, most used first.
    pub slice_usage: Vec<(usize, usize)>,
    pub nonfiring_events: usize,
    pub nonfiring_core: Vec<usize>,
    pub nonfiring_top_set: Option<Vec<usize>>,
}

impl HeadSignature {
    /// Whether the firing and non-firing top sets share no slice. `None`
    /// when either is missing.
    pub fn modes_disjoint(&self) -> Option<bool> {
        let a = self.top_set.as_ref()?;
        let b = self.nonfiring_top_set.as_ref()?;
        Some(a.iter().all(|k| !b.contains(k)))
    }
}

/// Accumulates per-head slice signatures.
///
/// Firing mode uses every firing with `src != 0`. Non-firing mode, for the
/// heads in `nonfiring_heads`, uses each row `i >= 1` with no weight above
/// the threshold on any `j >= 1`, at `j* = argmax_{j >= 1} A_ij`.
#[derive(Debug, Clone)]
pub struct SignatureAccumulator {
    threshold: f64,
    nonfiring_heads: Vec<HeadId>,
    firing: BTreeMap<HeadId, SetStats>,
    nonfiring: BTreeMap<HeadId, SetStats>,
}

impl SignatureAccumulator {
    pub fn new(threshold: f64, nonfiring_heads: &[HeadId]) -> Self {
        Self {
            threshold,
            nonfiring_heads: nonfiring_heads.to_vec(),
            firing: BTreeMap::new(),
            nonfiring: BTreeMap::new(),
        }
    }

    pub fn add_firings(&mut self, firings: &[FiringSummary]) {
        for f in firings.iter().filter(|f| f.src != 0) {
            self.firing.entry(f.head).or_default().add(&f.signal, f.single_dominant);
        }
    }

    pub fn add_nonfiring(&mut self, capture: &RunCapture, omegas: &OmegaSet) -> Result<()> {
        for &h in &self.nonfiring_heads {
            let hc = capture.head(h);
            let svd = omegas.get(h);
            for i in 1..capture.n_tokens() {
                let row = hc.weights.row(i);
                if row[1..=i].iter().any(|&w| w > self.threshold) {
                    continue;
                }
                let jstar = (1..=i)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .unwrap_or(1);
                let c = slice_contributions(capture, svd, i, jstar)?;
                let s = SignalSet::new(svd, &c, &head_input_tilde(capture, h, i));
                let dom = single_dominant(&c.terms, &s.indices);
                self.nonfiring.entry(h).or_default().add(&s.indices, dom);
            }
        }
        Ok(())
    }

    pub fn signature(&self, h: HeadId) -> HeadSignature {
        let empty = SetStats::default();
        let f = self.firing.get(&h).unwrap_or(&empty);
        let nf = self.nonfiring.get(&h).unwrap_or(&empty);
        let mut usage: Vec<(usize, usize)> = f.slice_counts.iter().map(|(k, c)| (*k, *c)).collect();
        usage.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        HeadSignature {
            head: h,
            firings: f.events,
            mean_size: (f.events > 0).then(|| f.size_sum as f64 / f.events as f64),
            single_dominant_fraction: (f.events > 0).then(|| f.dominant as f64 / f.events as f64),
            core: f.core(0.5),
            top_set: f.top_set(),
            slice_usage: usage,
            nonfiring_events: nf.events,
            nonfiring_core: nf.core(0.5),
            nonfiring_top_set: nf.top_set(),
        }
    }

    pub fn heads(&self) -> BTreeSet<HeadId> {
        self.firing.keys().chain(self.nonfiring.keys()).copied().collect()
    }
}

/// Mean upstream contribution into one downstream head at one token role.
///
/// Each cell `(l, b)` sums the head's contributions through both the
/// destination and the source token of a firing, then averages over the
/// firings counted. Only firings with `src != 0` whose destination has the
/// requested role count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub downstream: HeadId,
    pub role: Role,
    pub mode: SliceMode,
    pub events: usize,
    pub sum: Matrix,
}

impl Heatmap {
    pub fn new(config: &ModelConfig, downstream: HeadId, role: Role, mode: SliceMode) -> Self {
        Self {
            downstream,
            role,
            mode,
            events: 0,
            sum: Matrix::zeros(config.n_layers, config.n_heads),
        }
    }

    pub fn add(&mut self, capture: &RunCapture, omegas: &OmegaSet, roles: &Roles, threshold: f64) -> Result<()> {
        let Some(i) = roles.position(self.role) else {
            return Ok(());
        };
        let h = self.downstream;
        let svd = omegas.get(h);
        let hc = capture.head(h);
        for j in 1..=i {
            if hc.weight(i, j) <= threshold {
                continue;
            }
            let sig = signal_for(capture, svd, i, j, self.mode)?;
            for side in [Side::Dest, Side::Src] {
                for c in upstream_contributions(capture, svd, &sig, side) {
                    let v = self.sum.get(c.upstream.layer, c.upstream.head) + c.value;
                    self.sum.set(c.upstream.layer, c.upstream.head, v);
                }
            }
            self.events += 1;
        }
        Ok(())
    }

    pub fn mean(&self) -> Matrix {
        if self.events == 0 {
            return self.sum.clone();
        }
        self.sum.scale(1.0 / self.events as f64)
    }

    /// Entropy of the `|cell|` distribution over upstream layers.
    pub fn entropy(&self) -> f64 {
        let m = self.mean();
        let cells: Vec<f64> = (0..self.downstream.layer).flat_map(|l| m.row(l).to_vec()).collect();
        abs_entropy(&cells)
    }

    /// Upstream heads by decreasing mean contribution.
    pub fn ranked(&self) -> Vec<(HeadId, f64)> {
        let m = self.mean();
        let mut v: Vec<(HeadId, f64)> = (0..self.downstream.layer)
            .flat_map(|l| (0..m.cols()).map(move |b| (l, b)))
            .map(|(l, b)| (HeadId::new(l, b), m.get(l, b)))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    /// `layer,head,value` rows of the mean matrix.
    pub fn to_csv(&self) -> String {
        let m = self.mean();
        let mut s = String::from("layer,head,value\n");
        for l in 0..m.rows() {
            for b in 0..m.cols() {
                let _ = writeln!(s, "{l},{b},{:.12e}", m.get(l, b));
            }
        }
        s
    }
}

/// Per-token coordinates `v_k . [x; 0]` of one head's inputs, kept until the
/// consensus slice set is known.
#[derive(Debug, Clone, Default)]
pub struct ConsensusAccumulator {
    head: Option<HeadId>,
    threshold: f64,
    slice_counts: BTreeMap<usize, usize>,
    firings: usize,
    /// `(role, token text, coordinates)` per token.
    tokens: Vec<(Role, String, Vec<f64>)>,
}

/// Mean `|P_V [x; 0]|` per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub head: HeadId,
    pub firings: usize,
    pub min_firings: usize,
    pub slices: Vec<usize>,
    pub by_role: BTreeMap<Role, f64>,
    /// `(token text, is a name role, mean magnitude, count)`, strongest first.
    pub by_token: Vec<(String, bool, f64, usize)>,
}

impl ConsensusReport {
    /// Smallest name-role mean minus largest non-name-role mean; positive
    /// when a threshold separates the two groups.
    pub fn role_margin(&self) -> Option<f64> {
        let names = self.by_role.iter().filter(|(r, _)| r.is_name()).map(|(_, v)| *v);
        let others = self.by_role.iter().filter(|(r, _)| !r.is_name()).map(|(_, v)| *v);
        let lo = names.fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.min(v))))?;
        let hi = others.fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))))?;
        Some(lo - hi)
    }
}

impl ConsensusAccumulator {
    pub fn new(head: HeadId, threshold: f64) -> Self {
        Self {
            head: Some(head),
            threshold,
            ..Default::default()
        }
    }

    fn head(&self) -> HeadId {
        self.head.unwrap_or(HeadId::new(0, 0))
    }

    /// Records the head's firings (with `src != 0`) and the coordinates of
    /// every token input. `texts[t]` labels token `t`.
    pub fn add(
        &mut self,
        capture: &RunCapture,
        omegas: &OmegaSet,
        firings: &[FiringSummary],
        roles: &Roles,
        texts: &[String],
    ) -> Result<()> {
        let h = self.head();
        for f in firings
            .iter()
            .filter(|f| f.head == h && f.src != 0 && f.weight > self.threshold)
        {
            self.firings += 1;
            for &k in &f.signal {
                *self.slice_counts.entry(k).or_default() += 1;
            }
        }
        let svd = omegas.get(h);
        let x = capture.head_input(h);
        if texts.len() != capture.n_tokens() {
            return Err(Error::Shape {
                op: "consensus",
                detail: format!("{} labels for {} tokens", texts.len(), capture.n_tokens()),
            });
        }
        for (t, text) in texts.iter().enumerate() {
            let xt = extend_zero(x.row(t));
            let coords = svd.v.iter().map(|v| dot(v, &xt)).collect();
            self.tokens.push((roles.role_of(t), text.clone(), coords));
        }
        Ok(())
    }

    /// Builds the consensus subspace from slices used in at least
    /// `min_firings` firings and reports mean signal magnitudes. `None` when
    /// the head never fired.
    pub fn finish(&self, min_firings: usize) -> Option<ConsensusReport> {
        if self.firings == 0 {
            return None;
        }
        let slices: Vec<usize> = self
            .slice_counts
            .iter()
            .filter(|(_, c)| **c >= min_firings)
            .map(|(k, _)| *k)
            .collect();
        let mut roles: BTreeMap<Role, (f64, usize)> = BTreeMap::new();
        let mut toks: BTreeMap<(String, bool), (f64, usize)> = BTreeMap::new();
        for (role, text, coords) in &self.tokens {
            let m = slices.iter().map(|&k| coords[k] * coords[k]).sum::<f64>().sqrt();
            let e = roles.entry(*role).or_default();
            e.0 += m;
            e.1 += 1;
            let e = toks.entry((text.clone(), role.is_name())).or_default();
            e.0 += m;
            e.1 += 1;
        }
        let mut by_token: Vec<(String, bool, f64, usize)> = toks
            .into_iter()
            .map(|((t, name), (s, n))| (t, name, s / n as f64, n))
            .collect();
        by_token.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        Some(ConsensusReport {
            head: self.head(),
            firings: self.firings,
            min_firings,
            slices,
            by_role: roles.into_iter().map(|(r, (s, n))| (r, s / n as f64)).collect(),
            by_token,
        })
    }
}

/// Reproducibility record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub weights_digest: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub n_prompts: usize,
    pub parameters: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_stats() {
        let mut h = SparsityHistogram::default();
        assert_eq!(h.median(), None);
        assert_eq!(h.to_csv(), "size,count\n");
        for s in [1, 2, 2, 3, 30] {
            h.add(s);
        }
        assert_eq!(h.median(), Some(2));
        assert!((h.fraction_at_most(10) - 0.8).abs() < 1e-12);
        assert_eq!(h.max(), Some(30));
        let csv = h.to_csv();
        assert_eq!(csv.lines().count(), 32);
        assert!(csv.contains("\n2,2\n"));
    }

    #[test]
    fn dominance_rule() {
        let terms = [5.0, 3.0, 2.5, -2.0];
        assert!(single_dominant(&terms, &[0, 2]));
        assert!(!single_dominant(&terms, &[0, 1, 2]));
        assert!(single_dominant(&terms, &[1]));
        assert!(!single_dominant(&terms, &[]));
    }

    #[test]
    fn set_stats_modes() {
        let mut s = SetStats::default();
        s.add(&[1, 2], false);
        s.add(&[1, 2], true);
        s.add(&[3], false);
        s.add(&[], false);
        assert_eq!(s.top_set(), Some(vec![1, 2]));
        assert_eq!(s.core(0.5), vec![1, 2]);
        let mut e = SetStats::default();
        e.add(&[], false);
        assert_eq!(e.top_set(), None);
    }
}
