// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense real linear algebra: row-major matrices, products with a fixed
//! summation order, Householder thin QR, one-sided Jacobi SVD for small
//! square matrices, and orthogonal projectors.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sweep cap for the Jacobi SVD.
pub const SVD_MAX_SWEEPS: usize = 10_000;

/// Orthonormality tolerance accepted by [`projector`].
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::new",
                detail: format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "Matrix::from_rows",
                    detail: format!("row {i} has {} entries, expected {cols}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "Matrix::sub", |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "Matrix::add", |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape {
                op,
                detail: format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    /// `self * v` for a column vector `v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Shape {
                op: "Matrix::mul_vec",
                detail: format!("{}x{} times vector of {}", self.rows, self.cols, v.len()),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_block(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }

    /// Stable digest of the exact bit pattern, used in error messages.
    pub fn fingerprint(&self) -> String {
        let mut h = DefaultHasher::new();
        self.rows.hash(&mut h);
        self.cols.hash(&mut h);
        for x in &self.data {
            x.to_bits().hash(&mut h);
        }
        format!(
            "{}x{} fro={:.6e} hash={:016x}",
            self.rows,
            self.cols,
            self.frobenius_norm(),
            h.finish()
        )
    }
}

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Self { data: vec![0.0; len] }
    }

    pub fn unit(len: usize, axis: usize) -> Self {
        let mut v = Self::zeros(len);
        v.data[axis] = 1.0;
        v
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

impl From<&[f64]> for Vector {
    fn from(data: &[f64]) -> Self {
        Self { data: data.to_vec() }
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const MATMUL_COL_BLOCK: usize = 1024;

/// Matrix product `a * b`.
///
/// Every output entry accumulates its terms in ascending inner-index order,
/// so the result is bit-identical to the textbook triple loop.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    matmul_into(a.as_slice(), a.rows, a.cols, b, &mut out.data);
    Ok(out)
}

/// Raw kernel: `out (m x b.cols) += a (m x k) * b`. Column-blocked so the
/// weight matrix is streamed once per block regardless of `m`.
pub(crate) fn matmul_into(a: &[f64], m: usize, k: usize, b: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.rows, k);
    let n = b.cols;
    debug_assert_eq!(out.len(), m * n);
    let mut c0 = 0;
    while c0 < n {
        let c1 = (c0 + MATMUL_COL_BLOCK).min(n);
        for p in 0..k {
            let brow = &b.data[p * n + c0..p * n + c1];
            for i in 0..m {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n + c0..i * n + c1];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        c0 = c1;
    }
}

/// Thin QR factorisation by Householder reflections.
///
/// Returns `Q` (m x n, orthonormal columns) and `R` (n x n, upper triangular
/// with a nonnegative diagonal). Rank-deficient inputs still give an
/// orthonormal `Q`; the corresponding diagonal entries of `R` are zero.
pub fn thin_qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = (a.rows, a.cols);
    if m < n {
        return Err(Error::Shape {
            op: "thin_qr",
            detail: format!("needs rows >= cols, got {m}x{n}"),
        });
    }
    // Column-major working copy.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| a.col(c)).collect();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);

    for k in 0..n {
        let x = &cols[k][k..];
        let xnorm = norm(x);
        if xnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vnorm = norm(&v);
        if vnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        for e in v.iter_mut() {
            *e /= vnorm;
        }
        for col in cols.iter_mut().skip(k) {
            let tail = &mut col[k..];
            let proj = 2.0 * dot(&v, tail);
            axpy(-proj, &v, tail);
        }
        reflectors.push(Some(v));
    }

    let mut r = Matrix::zeros(n, n);
    for (c, col) in cols.iter().enumerate() {
        for row in 0..=c {
            r.set(row, c, col[row]);
        }
    }

    // Q = H_0 H_1 ... H_{n-1} [I_n; 0], built column by column.
    let mut q_cols: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; m];
            e[c] = 1.0;
            e
        })
        .collect();
    for (k, refl) in reflectors.iter().enumerate().rev() {
        if let Some(v) = refl {
            for qc in q_cols.iter_mut() {
                let tail = &mut qc[k..];
                let proj = 2.0 * dot(v, tail);
                axpy(-proj, v, tail);
            }
        }
    }

    for k in 0..n {
        if r.get(k, k) < 0.0 {
            for c in k..n {
                r.set(k, c, -r.get(k, c));
            }
            for e in q_cols[k].iter_mut() {
                *e = -*e;
            }
        }
    }

    let q = Matrix::from_fn(m, n, |row, c| q_cols[c][row]);
    Ok((q, r))
}

/// Result of [`svd_small`]: `a = U diag(sigma) V^T`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vector,
    pub v: Matrix,
}

/// SVD of a small square matrix (n <= 64) by one-sided Jacobi rotations.
///
/// Singular values come back sorted in descending order. Left singular
/// vectors belonging to (numerically) zero singular values are completed to
/// an orthonormal basis.
pub fn svd_small(a: &Matrix) -> Result<Svd> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::Shape {
            op: "svd_small",
            detail: format!("expected square matrix, got {}x{}", a.rows, a.cols),
        });
    }
    if n > 64 {
        return Err(Error::Shape {
            op: "svd_small",
            detail: format!("n = {n} exceeds 64"),
        });
    }
    if !a.is_finite() {
        return Err(Error::Numeric {
            op: "svd_small",
            detail: format!("non-finite input {}", a.fingerprint()),
        });
    }

    let mut w: Vec<Vec<f64>> = (0..n).map(|c| a.col(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    let tol = 1e-15;
    let mut converged = false;
    for _sweep in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric {
            op: "svd_small",
            detail: format!(
                "no convergence after {SVD_MAX_SWEEPS} sweeps; matrix {}",
                a.fingerprint()
            ),
        });
    }

    let mut order: Vec<(f64, usize)> = w.iter().enumerate().map(|(k, c)| (norm(c), k)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let smax = order.first().map_or(0.0, |o| o.0);
    let small = smax * 1e-13;
    let mut sigma = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for &(s, k) in &order {
        sigma.push(s);
        v_cols.push(v[k].clone());
        if s > small && s > 0.0 {
            u_cols.push(w[k].iter().map(|x| x / s).collect());
        } else {
            pending.push(u_cols.len());
            u_cols.push(w[k].clone());
        }
    }
    for &idx in &pending {
        let filled = complete_basis_vector(&u_cols, idx, &pending);
        u_cols[idx] = filled;
    }

    let u = Matrix::from_fn(n, n, |r, c| u_cols[c][r]);
    let vm = Matrix::from_fn(n, n, |r, c| v_cols[c][r]);
    Ok(Svd {
        u,
        sigma: Vector::from(sigma),
        v: vm,
    })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Replace column `idx` by a unit vector orthogonal to every settled column
/// (all columns not in `pending`, plus pending ones already filled, i.e.
/// those before `idx`).
fn complete_basis_vector(cols: &[Vec<f64>], idx: usize, pending: &[usize]) -> Vec<f64> {
    let n = cols[idx].len();
    let settled: Vec<&Vec<f64>> = cols
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != idx && (!pending.contains(k) || *k < idx))
        .map(|(_, c)| c)
        .collect();
    let mut candidates: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    if norm(&cols[idx]) > 0.0 {
        candidates.push(cols[idx].clone());
    }
    for e in 0..n {
        let mut c = vec![0.0; n];
        c[e] = 1.0;
        candidates.push(c);
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mut c in candidates {
        let n0 = norm(&c);
        for _ in 0..2 {
            for s in &settled {
                let p = dot(s, &c);
                axpy(-p, s, &mut c);
            }
        }
        let nc = norm(&c);
        if nc > 0.5 * n0 {
            for x in c.iter_mut() {
                *x /= nc;
            }
            return c;
        }
        if best.as_ref().is_none_or(|b| nc > b.0) {
            best = Some((nc, c));
        }
    }
    let (nc, mut c) = best.expect("at least one candidate");
    for x in c.iter_mut() {
        *x /= nc;
    }
    c
}

/// Orthogonal projector `P = sum_k u_k u_k^T` onto the span of an
/// orthonormal basis of `dim`-dimensional vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceProjector {
    dim: usize,
    basis: Vec<Vec<f64>>,
}

impl SubspaceProjector {
    /// Builds the projector, checking orthonormality within [`ORTHONORMAL_TOL`].
    pub fn new(dim: usize, basis: Vec<Vec<f64>>) -> Result<Self> {
        for (i, b) in basis.iter().enumerate() {
            if b.len() != dim {
                return Err(Error::Shape {
                    op: "projector",
                    detail: format!("basis vector {i} has length {}, expected {dim}", b.len()),
                });
            }
        }
        for i in 0..basis.len() {
            for j in i..basis.len() {
                let g = dot(&basis[i], &basis[j]);
                let target = if i == j { 1.0 } else { 0.0 };
                if (g - target).abs() > ORTHONORMAL_TOL {
                    return Err(Error::Contract {
                        op: "projector",
                        detail: format!("basis not orthonormal: <b{i}, b{j}> = {g}"),
                    });
                }
            }
        }
        Ok(Self { dim, basis })
    }

    /// Skips the orthonormality check; for bases that are orthonormal by
    /// construction (rows of a singular-vector matrix).
    pub(crate) fn from_orthonormal(dim: usize, basis: Vec<Vec<f64>>) -> Self {
        Self { dim, basis }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    /// `P x`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for b in &self.basis {
            axpy(dot(b, x), b, &mut out);
        }
        out
    }

    /// `(I - P) x`
    pub fn apply_complement(&self, x: &[f64]) -> Vec<f64> {
        let p = self.apply(x);
        x.iter().zip(&p).map(|(a, b)| a - b).collect()
    }

    pub fn matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.dim, self.dim);
        for b in &self.basis {
            for r in 0..self.dim {
                if b[r] == 0.0 {
                    continue;
                }
                axpy(b[r], b, m.row_mut(r));
            }
        }
        m
    }

    /// `I - P` as a dense matrix.
    pub fn complement_matrix(&self) -> Matrix {
        complement(&self.matrix())
    }
}

/// Dense projector onto the span of an orthonormal basis.
pub fn projector(dim: usize, basis: &[Vector]) -> Result<Matrix> {
    let p = SubspaceProjector::new(dim, basis.iter().map(|b| b.to_vec()).collect())?;
    Ok(p.matrix())
}

/// `I - P`
pub fn complement(p: &Matrix) -> Matrix {
    let n = p.rows();
    Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 } - p.get(r, c))
}
