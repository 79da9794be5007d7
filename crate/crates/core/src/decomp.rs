// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-slice decomposition of attention scores, signal/noise separation and
//! firing detection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, SubspaceProjector};
use crate::model::{HeadId, RunCapture};
use crate::omega::{extend_one, OmegaSvd};

/// Attention weight above which a head is said to fire.
pub const FIRING_THRESHOLD: f64 = 0.5;

/// Relative tolerance of the score consistency check.
pub const CONSISTENCY_REL_TOL: f64 = 1e-4;
/// Absolute floor of the score consistency check.
pub const CONSISTENCY_ABS_TOL: f64 = 1e-6;

/// The `r` slice terms of one attention score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceContribs {
    pub head: HeadId,
    pub i: usize,
    pub j: usize,
    /// `terms[k] = (x_i . u_k) sigma_k (v_k . x_j)`
    pub terms: Vec<f64>,
    pub score: f64,
}

/// Slice terms for two homogeneous inputs.
pub fn slice_terms(svd: &OmegaSvd, x_dest: &[f64], x_src: &[f64]) -> Vec<f64> {
    (0..svd.rank())
        .map(|k| dot(x_dest, &svd.u[k]) * svd.sigma[k] * dot(&svd.v[k], x_src))
        .collect()
}

/// Homogeneous input `[x; 1]` read by `head` at `token`.
pub fn head_input_tilde(capture: &RunCapture, head: HeadId, token: usize) -> Vec<f64> {
    extend_one(capture.head_input(head).row(token))
}

/// Decomposes the captured score `A'_ij` of `svd.head` and checks that the
/// terms add back up to it.
pub fn slice_contributions(capture: &RunCapture, svd: &OmegaSvd, i: usize, j: usize) -> Result<SliceContribs> {
    let head = svd.head;
    let n = capture.n_tokens();
    if i >= n || j > i {
        return Err(Error::Range(format!("token pair ({i},{j}) invalid for {n} tokens")));
    }
    let xi = head_input_tilde(capture, head, i);
    let xj = head_input_tilde(capture, head, j);
    let terms = slice_terms(svd, &xi, &xj);
    let score: f64 = terms.iter().sum();
    let captured = capture.head(head).score(i, j);
    let tol = (CONSISTENCY_REL_TOL * captured.abs()).max(CONSISTENCY_ABS_TOL);
    if !((score - captured).abs() <= tol) {
        return Err(Error::Consistency {
            layer: head.layer,
            head: head.head,
            dest: i,
            src: j,
            decomposed: score,
            captured,
        });
    }
    Ok(SliceContribs {
        head,
        i,
        j,
        terms,
        score,
    })
}

/// Signal slice indices under the greedy rule.
///
/// Terms are sorted ascending (ties by lower index). The noise set takes
/// every non-positive term, then keeps absorbing positive terms in that
/// order while its sum stays `<= 0`. What remains is the signal set.
/// Slices with `active[k] == false` are always noise.
pub fn separate_noise_masked(terms: &[f64], active: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..terms.len()).collect();
    order.sort_by(|&a, &b| terms[a].total_cmp(&terms[b]).then(a.cmp(&b)));
    let mut noise_sum = 0.0;
    let mut signal = Vec::new();
    let mut closed = false;
    for &k in &order {
        let t = terms[k];
        if !active[k] || t <= 0.0 {
            noise_sum += t;
        }
    }
    for &k in &order {
        let t = terms[k];
        if !active[k] || t <= 0.0 {
            continue;
        }
        if !closed && noise_sum + t <= 0.0 {
            noise_sum += t;
        } else {
            closed = true;
            signal.push(k);
        }
    }
    signal.sort_unstable();
    signal
}

/// [`separate_noise_masked`] with every slice active.
pub fn separate_noise(terms: &[f64]) -> Vec<usize> {
    separate_noise_masked(terms, &vec![true; terms.len()])
}

/// Signal slices of one `(head, i, j)` with their projectors and the
/// orientation signs fixed by the destination input.
#[derive(Debug, Clone)]
pub struct SignalSet {
    pub head: HeadId,
    pub i: usize,
    pub j: usize,
    /// Sorted slice indices.
    pub indices: Vec<usize>,
    /// `signs[k]` orients slice `k` so that `signs[k] * u_k . x_i >= 0`.
    pub signs: Vec<f64>,
    pub p_u: SubspaceProjector,
    pub p_v: SubspaceProjector,
}

impl SignalSet {
    /// Builds the signal set of `c` using `svd`, oriented by `x_dest`.
    pub fn new(svd: &OmegaSvd, c: &SliceContribs, x_dest: &[f64]) -> Self {
        let active: Vec<bool> = (0..svd.rank()).map(|k| svd.is_active(k)).collect();
        let indices = separate_noise_masked(&c.terms, &active);
        Self::from_indices(svd, c.i, c.j, indices, x_dest)
    }

    pub fn from_indices(svd: &OmegaSvd, i: usize, j: usize, indices: Vec<usize>, x_dest: &[f64]) -> Self {
        let signs = svd.orientation_signs(x_dest);
        let dim = svd.dim();
        let p_u = SubspaceProjector::from_orthonormal(dim, indices.iter().map(|&k| svd.u[k].clone()).collect());
        let p_v = SubspaceProjector::from_orthonormal(dim, indices.iter().map(|&k| svd.v[k].clone()).collect());
        Self {
            head: svd.head,
            i,
            j,
            indices,
            signs,
            p_u,
            p_v,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// A head placing more than the threshold weight on one source token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiringEvent {
    pub head: HeadId,
    pub dest: usize,
    pub src: usize,
    pub weight: f64,
}

/// Every `(head, i, j)` with `A_ij > threshold`, token 0 included.
pub fn detect_firings_with(capture: &RunCapture, threshold: f64) -> Vec<FiringEvent> {
    let mut out = Vec::new();
    for (l, lc) in capture.layers.iter().enumerate() {
        for (h, hc) in lc.heads.iter().enumerate() {
            for i in 0..capture.n_tokens() {
                for j in 0..=i {
                    let w = hc.weights.get(i, j);
                    if w > threshold {
                        out.push(FiringEvent {
                            head: HeadId::new(l, h),
                            dest: i,
                            src: j,
                            weight: w,
                        });
                    }
                }
            }
        }
    }
    out
}

/// [`detect_firings_with`] at the default threshold.
pub fn detect_firings(capture: &RunCapture) -> Vec<FiringEvent> {
    detect_firings_with(capture, FIRING_THRESHOLD)
}
