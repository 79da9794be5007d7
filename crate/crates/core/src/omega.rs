// SPDX-License-Identifier: MIT OR Apache-2.0

//! The bilinear form `Omega` of each attention head, kept in factored form
//! `A B^T`, and its thin SVD.
//!
//! Residual vectors are extended with a trailing `1` so the query and key
//! biases live inside `Omega`; head outputs are extended with a trailing `0`.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, matmul, svd_small, thin_qr, Matrix};
use crate::model::{FoldedWeights, HeadId};

/// Relative cutoff below which a singular value is treated as zero.
pub const SIGMA_REL_CUTOFF: f64 = 1e-10;

/// `x -> [x; 1]`
pub fn extend_one(x: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + 1);
    v.extend_from_slice(x);
    v.push(1.0);
    v
}

/// `o -> [o; 0]`
pub fn extend_zero(o: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(o.len() + 1);
    v.extend_from_slice(o);
    v.push(0.0);
    v
}

/// `Omega = A B^T` with `A = [W_Q; b_Q^T]`, `B = [W_K; b_K^T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaFactor {
    pub head: HeadId,
    pub a: Matrix,
    pub b: Matrix,
}

impl OmegaFactor {
    pub fn from_parts(head: HeadId, w_q: &Matrix, b_q: &[f64], w_k: &Matrix, b_k: &[f64]) -> Result<Self> {
        if w_q.rows() != w_k.rows() || w_q.cols() != w_k.cols() || b_q.len() != w_q.cols() || b_k.len() != w_k.cols() {
            return Err(Error::Shape {
                op: "build_omega",
                detail: format!(
                    "W_Q {}x{}, b_Q {}, W_K {}x{}, b_K {}",
                    w_q.rows(),
                    w_q.cols(),
                    b_q.len(),
                    w_k.rows(),
                    w_k.cols(),
                    b_k.len()
                ),
            });
        }
        let stack = |w: &Matrix, b: &[f64]| {
            let d = w.rows();
            Matrix::from_fn(d + 1, w.cols(), |r, c| if r < d { w.get(r, c) } else { b[c] })
        };
        Ok(Self {
            head,
            a: stack(w_q, b_q),
            b: stack(w_k, b_k),
        })
    }

    /// `x^T Omega y` for homogeneous vectors, without forming `Omega`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let r = self.a.cols();
        let mut s = 0.0;
        for c in 0..r {
            let xa: f64 = (0..x.len()).map(|p| x[p] * self.a.get(p, c)).sum();
            let yb: f64 = (0..y.len()).map(|p| y[p] * self.b.get(p, c)).sum();
            s += xa * yb;
        }
        s
    }

    /// The full `(d+1) x (d+1)` matrix. Only meant for tests and small models.
    pub fn dense(&self) -> Matrix {
        matmul(&self.a, &self.b.transpose()).expect("factor shapes agree")
    }
}

pub fn build_omega(weights: &FoldedWeights, head: HeadId) -> Result<OmegaFactor> {
    let cfg = &weights.config;
    if head.layer >= cfg.n_layers || head.head >= cfg.n_heads {
        return Err(Error::Range(format!(
            "head {head} outside {}x{}",
            cfg.n_layers, cfg.n_heads
        )));
    }
    let (wq, bq) = weights.query(head);
    let (wk, bk) = weights.key(head);
    OmegaFactor::from_parts(head, &wq, &bq, &wk, &bk)
}

/// One rank-1 term `u sigma v^T` of `Omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice<'a> {
    pub k: usize,
    pub u: &'a [f64],
    pub v: &'a [f64],
    pub sigma: f64,
}

/// Thin SVD `Omega = sum_k u_k sigma_k v_k^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaSvd {
    pub head: HeadId,
    pub sigma: Vec<f64>,
    /// `u[k]` is the k-th left singular vector (length d+1).
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OmegaSvd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn dim(&self) -> usize {
        self.u.first().map_or(0, Vec::len)
    }

    pub fn slice(&self, k: usize) -> Slice<'_> {
        Slice {
            k,
            u: &self.u[k],
            v: &self.v[k],
            sigma: self.sigma[k],
        }
    }

    /// Whether slice `k` is above the relative singular-value cutoff.
    pub fn is_active(&self, k: usize) -> bool {
        let s0 = self.sigma.first().copied().unwrap_or(0.0);
        s0 > 0.0 && self.sigma[k] >= SIGMA_REL_CUTOFF * s0
    }

    /// Per-slice signs `s_k` such that `s_k u_k . x_dest >= 0`; exact zeros
    /// keep the stored sign.
    pub fn orientation_signs(&self, x_dest: &[f64]) -> Vec<f64> {
        self.u
            .iter()
            .map(|u| if dot(u, x_dest) < 0.0 { -1.0 } else { 1.0 })
            .collect()
    }

    /// Copy with `(u_k, v_k)` flipped jointly wherever `u_k . x_dest < 0`.
    pub fn orient_slices(&self, x_dest: &[f64]) -> OmegaSvd {
        let signs = self.orientation_signs(x_dest);
        let flip = |vs: &[Vec<f64>]| -> Vec<Vec<f64>> {
            vs.iter()
                .zip(&signs)
                .map(|(v, s)| {
                    if *s < 0.0 {
                        v.iter().map(|x| -x).collect()
                    } else {
                        v.clone()
                    }
                })
                .collect()
        };
        OmegaSvd {
            head: self.head,
            sigma: self.sigma.clone(),
            u: flip(&self.u),
            v: flip(&self.v),
        }
    }

    /// `U diag(sigma) V^T` as a dense matrix (tests and small models only).
    pub fn dense(&self) -> Matrix {
        let n = self.dim();
        let mut m = Matrix::zeros(n, n);
        for k in 0..self.rank() {
            let (u, v, s) = (&self.u[k], &self.v[k], self.sigma[k]);
            for r in 0..n {
                let a = u[r] * s;
                if a == 0.0 {
                    continue;
                }
                for (x, vc) in m.row_mut(r).iter_mut().zip(v) {
                    *x += a * vc;
                }
            }
        }
        m
    }
}

/// SVD of `A B^T` via QR of both factors and an r x r SVD.
pub fn factored_svd(f: &OmegaFactor) -> Result<OmegaSvd> {
    let (qa, ra) = thin_qr(&f.a)?;
    let (qb, rb) = thin_qr(&f.b)?;
    let core = matmul(&ra, &rb.transpose())?;
    let small = svd_small(&core).map_err(|e| match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op,
            detail: format!("head {}: {detail}", f.head),
        },
        other => other,
    })?;
    let u = matmul(&qa, &small.u)?.transpose();
    let v = matmul(&qb, &small.v)?.transpose();
    let r = small.sigma.len();
    Ok(OmegaSvd {
        head: f.head,
        sigma: small.sigma.to_vec(),
        u: (0..r).map(|k| u.row(k).to_vec()).collect(),
        v: (0..r).map(|k| v.row(k).to_vec()).collect(),
    })
}

/// SVDs of every head, indexed layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaSet {
    pub n_layers: usize,
    pub n_heads: usize,
    pub svds: Vec<OmegaSvd>,
}

const CACHE_MAGIC: &[u8; 8] = b"SVTOMEGA";
const CACHE_VERSION: u32 = 1;

impl OmegaSet {
    /// Computes all heads in parallel.
    pub fn compute(weights: &FoldedWeights) -> Result<Self> {
        let heads: Vec<HeadId> = weights.heads().collect();
        let svds = heads
            .par_iter()
            .map(|&h| factored_svd(&build_omega(weights, h)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_layers: weights.config.n_layers,
            n_heads: weights.config.n_heads,
            svds,
        })
    }

    pub fn get(&self, h: HeadId) -> &OmegaSvd {
        &self.svds[h.layer * self.n_heads + h.head]
    }

    /// Writes the binary cache.
    ///
    /// Layout (all integers `u32`, floats `f64`, little-endian): magic
    /// `SVTOMEGA`, version, n_layers, n_heads, dim (d+1), rank, 64 bytes of
    /// ASCII hex sha256 of the weight file, then per head in layer-major
    /// order: `rank` sigmas, `rank` rows of U, `rank` rows of V.
    pub fn write_cache(&self, path: impl AsRef<Path>, digest: &str) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        let (dim, rank) = self.svds.first().map_or((0, 0), |s| (s.dim(), s.rank()));
        for x in [
            CACHE_VERSION,
            self.n_layers as u32,
            self.n_heads as u32,
            dim as u32,
            rank as u32,
        ] {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        let mut dig = [b'0'; 64];
        let db = digest.as_bytes();
        dig[..db.len().min(64)].copy_from_slice(&db[..db.len().min(64)]);
        buf.extend_from_slice(&dig);
        for s in &self.svds {
            let floats = s.sigma.iter().chain(s.u.iter().flatten()).chain(s.v.iter().flatten());
            for x in floats {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a cache written by [`OmegaSet::write_cache`], rejecting it if
    /// the recorded digest differs from `digest`.
    pub fn read_cache(path: impl AsRef<Path>, digest: &str) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let bad = |detail: String| Error::Contract {
            op: "read_cache",
            detail,
        };
        if buf.len() < 8 + 20 + 64 || &buf[..8] != CACHE_MAGIC {
            return Err(bad("not an omega cache".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes")) as usize;
        let version = u32_at(8);
        if version != CACHE_VERSION as usize {
            return Err(bad(format!("cache version {version}, expected {CACHE_VERSION}")));
        }
        let (n_layers, n_heads, dim, rank) = (u32_at(12), u32_at(16), u32_at(20), u32_at(24));
        let stored = String::from_utf8_lossy(&buf[28..92]).to_string();
        if stored != digest {
            return Err(bad(format!("cache digest {stored} does not match weights {digest}")));
        }
        let per_head = rank + 2 * rank * dim;
        let expect = 92 + n_layers * n_heads * per_head * 8;
        if buf.len() != expect {
            return Err(bad(format!("cache has {} bytes, expected {expect}", buf.len())));
        }
        let mut floats = buf[92..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut svds = Vec::with_capacity(n_layers * n_heads);
        for l in 0..n_layers {
            for h in 0..n_heads {
                let sigma: Vec<f64> = floats.by_ref().take(rank).collect();
                let mut rows =
                    |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| floats.by_ref().take(dim).collect()).collect() };
                let u = rows(rank);
                let v = rows(rank);
                svds.push(OmegaSvd {
                    head: HeadId::new(l, h),
                    sigma,
                    u,
                    v,
                });
            }
        }
        Ok(Self {
            n_layers,
            n_heads,
            svds,
        })
    }
}

/// Relative Frobenius error `||U S V^T - A B^T|| / ||A B^T||`, computed
/// without forming `Omega`: the residual is `[A, -US] [B, V]^T`, and after
/// thin QR of both stacked factors its norm is that of `R_1 R_2^T`.
pub fn reconstruction_error(f: &OmegaFactor, s: &OmegaSvd) -> f64 {
    let (dim, r, k) = (f.a.rows(), f.a.cols(), s.rank());
    let left = Matrix::from_fn(dim, r + k, |p, c| {
        if c < r {
            f.a.get(p, c)
        } else {
            -s.sigma[c - r] * s.u[c - r][p]
        }
    });
    let right = Matrix::from_fn(dim, r + k, |p, c| if c < r { f.b.get(p, c) } else { s.v[c - r][p] });
    let small_norm = |x: &Matrix, y: &Matrix| -> f64 {
        let (_, rx) = thin_qr(x).expect("tall factor");
        let (_, ry) = thin_qr(y).expect("tall factor");
        matmul(&rx, &ry.transpose()).expect("square").frobenius_norm()
    };
    let err = small_norm(&left, &right);
    let base = small_norm(&f.a, &f.b);
    if base == 0.0 {
        err
    } else {
        err / base
    }
}
