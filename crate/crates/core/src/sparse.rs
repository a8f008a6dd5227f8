//! Sparse symmetric matrices and an LDLᵀ factorization with a fill-reducing
//! ordering.
//!
//! The factorization follows the classic up-looking LDL algorithm: a
//! symbolic pass computes the elimination tree and column counts of `L`
//! once per sparsity pattern, and the numeric pass can then be repeated for
//! any values sharing that pattern.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Sparsity pattern of a symmetric matrix, stored as full (both triangles)
/// compressed columns with sorted row indices. The diagonal is always
/// present.
#[derive(Debug, Clone, PartialEq)]
pub struct SymPattern {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
}

impl SymPattern {
    /// Pattern containing the diagonal plus each `(i, j)` and its mirror.
    pub fn from_entries(n: usize, entries: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cols: Vec<BTreeSet<usize>> = (0..n).map(|k| BTreeSet::from([k])).collect();
        for (i, j) in entries {
            assert!(i < n && j < n, "entry ({i}, {j}) outside {n}x{n}");
            cols[j].insert(i);
            cols[i].insert(j);
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for col in cols {
            row_idx.extend(col);
            col_ptr.push(row_idx.len());
        }
        Self {
            n,
            col_ptr,
            row_idx,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn column(&self, j: usize) -> &[usize] {
        &self.row_idx[self.col_ptr[j]..self.col_ptr[j + 1]]
    }

    /// Storage offset of entry `(i, j)`, if it is in the pattern.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.col_ptr[j];
        self.column(j).binary_search(&i).ok().map(|k| start + k)
    }
}

/// Symmetric matrix with values laid out on a shared [`SymPattern`].
#[derive(Debug, Clone)]
pub struct SymMatrix {
    pattern: Arc<SymPattern>,
    values: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(pattern: Arc<SymPattern>) -> Self {
        let values = vec![0.0; pattern.nnz()];
        Self { pattern, values }
    }

    pub fn pattern(&self) -> &Arc<SymPattern> {
        &self.pattern
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Adds `v` to entry `(i, j)` and, off the diagonal, to `(j, i)`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let p = self
            .pattern
            .position(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) not in pattern"));
        self.values[p] += v;
        if i != j {
            let q = self.pattern.position(j, i).expect("pattern is symmetric");
            self.values[q] += v;
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern
            .position(i, j)
            .map(|p| self.values[p])
            .unwrap_or(0.0)
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        for j in 0..self.dim() {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            let start = self.pattern.col_ptr[j];
            for (k, &i) in self.pattern.column(j).iter().enumerate() {
                y[i] += self.values[start + k] * xj;
            }
        }
        y
    }

    /// `xᵀ A x`
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.dim();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for j in 0..n {
            let start = self.pattern.col_ptr[j];
            for (k, &i) in self.pattern.column(j).iter().enumerate() {
                m[(i, j)] = self.values[start + k];
            }
        }
        m
    }
}

/// Elimination order used by [`LdlSymbolic`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ordering {
    Natural,
    MinimumDegree,
}

/// Greedy minimum-degree ordering on the graph of the pattern. Ties go to
/// the smallest index; once the remaining nodes form a clique they are
/// appended in index order.
pub fn minimum_degree(pattern: &SymPattern) -> Vec<usize> {
    let n = pattern.n;
    let mut adj: Vec<BTreeSet<usize>> = (0..n)
        .map(|j| pattern.column(j).iter().copied().filter(|&i| i != j).collect())
        .collect();
    let mut alive = vec![true; n];
    let mut perm = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 0 {
        let v = (0..n)
            .filter(|&k| alive[k])
            .min_by_key(|&k| (adj[k].len(), k))
            .expect("a live node remains");
        if adj[v].len() + 1 == remaining {
            perm.extend((0..n).filter(|&k| alive[k]));
            break;
        }
        alive[v] = false;
        remaining -= 1;
        perm.push(v);
        let nb: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &a in &nb {
            adj[a].remove(&v);
        }
        for (x, &a) in nb.iter().enumerate() {
            for &b in &nb[x + 1..] {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
    }
    perm
}

/// Ordering, elimination tree and column layout of `L` for one pattern.
#[derive(Debug, Clone)]
pub struct LdlSymbolic {
    pattern: Arc<SymPattern>,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    parent: Vec<usize>,
    l_ptr: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl LdlSymbolic {
    pub fn new(pattern: Arc<SymPattern>, ordering: Ordering) -> Self {
        let n = pattern.n;
        let perm = match ordering {
            Ordering::Natural => (0..n).collect(),
            Ordering::MinimumDegree => minimum_degree(&pattern),
        };
        let mut iperm = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            iperm[p] = k;
        }
        let mut parent = vec![NONE; n];
        let mut flag = vec![0usize; n];
        let mut counts = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for &orig in pattern.column(perm[k]) {
                let mut i = iperm[orig];
                if i < k {
                    while flag[i] != k {
                        if parent[i] == NONE {
                            parent[i] = k;
                        }
                        counts[i] += 1;
                        flag[i] = k;
                        i = parent[i];
                    }
                }
            }
        }
        let mut l_ptr = Vec::with_capacity(n + 1);
        l_ptr.push(0);
        for c in counts {
            l_ptr.push(l_ptr.last().unwrap() + c);
        }
        Self {
            pattern,
            perm,
            iperm,
            parent,
            l_ptr,
        }
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn pattern(&self) -> &Arc<SymPattern> {
        &self.pattern
    }

    pub fn l_nnz(&self) -> usize {
        *self.l_ptr.last().unwrap()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }
}

/// Numeric LDLᵀ factor of `P A Pᵀ`.
#[derive(Debug, Clone)]
pub struct Ldl {
    symbolic: Arc<LdlSymbolic>,
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
    d: Vec<f64>,
}

impl Ldl {
    /// Factors `matrix`, whose pattern must be the symbolic one. Fails on a
    /// non-positive pivot.
    pub fn factor(symbolic: &Arc<LdlSymbolic>, matrix: &SymMatrix) -> Result<Self> {
        assert!(
            Arc::ptr_eq(symbolic.pattern(), matrix.pattern())
                || symbolic.pattern().as_ref() == matrix.pattern().as_ref(),
            "matrix pattern differs from the symbolic factorization"
        );
        let s = symbolic.as_ref();
        let n = s.dim();
        let lnz = s.l_nnz();
        let mut l_idx = vec![0usize; lnz];
        let mut l_val = vec![0.0; lnz];
        let mut d = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut stack = vec![0usize; n];
        let mut flag = vec![NONE; n];
        let mut filled = vec![0usize; n];
        let pat = &s.pattern;
        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            let col = s.perm[k];
            let start = pat.col_ptr[col];
            for (off, &orig) in pat.column(col).iter().enumerate() {
                let mut i = s.iperm[orig];
                if i <= k {
                    y[i] += matrix.values[start + off];
                    let mut len = 0;
                    while flag[i] != k {
                        stack[len] = i;
                        len += 1;
                        flag[i] = k;
                        i = s.parent[i];
                    }
                    while len > 0 {
                        top -= 1;
                        len -= 1;
                        stack[top] = stack[len];
                    }
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            for &i in &stack[top..n] {
                let yi = y[i];
                y[i] = 0.0;
                let p0 = s.l_ptr[i];
                let p1 = p0 + filled[i];
                for p in p0..p1 {
                    y[l_idx[p]] -= l_val[p] * yi;
                }
                let l_ki = yi / d[i];
                d[k] -= l_ki * yi;
                l_idx[p1] = k;
                l_val[p1] = l_ki;
                filled[i] += 1;
            }
            if !(d[k] > 0.0) || !d[k].is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: s.perm[k],
                    value: d[k],
                });
            }
        }
        Ok(Self {
            symbolic: Arc::clone(symbolic),
            l_idx,
            l_val,
            d,
        })
    }

    pub fn dim(&self) -> usize {
        self.d.len()
    }

    /// `ln det A`
    pub fn log_det(&self) -> f64 {
        self.d.iter().map(|v| v.ln()).sum()
    }

    fn lsolve(&self, x: &mut [f64]) {
        let s = &self.symbolic;
        for j in 0..self.dim() {
            let xj = x[j];
            if xj != 0.0 {
                for p in s.l_ptr[j]..s.l_ptr[j + 1] {
                    x[self.l_idx[p]] -= self.l_val[p] * xj;
                }
            }
        }
    }

    fn ltsolve(&self, x: &mut [f64]) {
        let s = &self.symbolic;
        for j in (0..self.dim()).rev() {
            let mut acc = x[j];
            for p in s.l_ptr[j]..s.l_ptr[j + 1] {
                acc -= self.l_val[p] * x[self.l_idx[p]];
            }
            x[j] = acc;
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let s = &self.symbolic;
        let mut x: Vec<f64> = s.perm.iter().map(|&p| b[p]).collect();
        self.lsolve(&mut x);
        for (v, d) in x.iter_mut().zip(&self.d) {
            *v /= d;
        }
        self.ltsolve(&mut x);
        let mut out = vec![0.0; x.len()];
        for (k, &p) in s.perm.iter().enumerate() {
            out[p] = x[k];
        }
        out
    }

    /// Maps standard-normal `z` to a draw from `N(0, A⁻¹)`:
    /// `x = Pᵀ L⁻ᵀ D^{-1/2} z`.
    pub fn sample_transform(&self, z: &[f64]) -> Vec<f64> {
        let s = &self.symbolic;
        let mut x: Vec<f64> = z.iter().zip(&self.d).map(|(v, d)| v / d.sqrt()).collect();
        self.ltsolve(&mut x);
        let mut out = vec![0.0; x.len()];
        for (k, &p) in s.perm.iter().enumerate() {
            out[p] = x[k];
        }
        out
    }

    /// Entries of `A⁻¹` on the pattern of `L` and the diagonal, by the
    /// Takahashi recursion.
    pub fn selected_inverse(&self) -> SelectedInverse {
        let s = &self.symbolic;
        let n = self.dim();
        let mut diag = vec![0.0; n];
        let mut off = vec![0.0; self.l_val.len()];
        let lookup = |diag: &[f64], off: &[f64], a: usize, b: usize| -> f64 {
            if a == b {
                return diag[a];
            }
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let r = s.l_ptr[lo]..s.l_ptr[lo + 1];
            let rows = &self.l_idx[r.clone()];
            let k = rows.binary_search(&hi).expect("filled pattern is closed");
            off[r.start + k]
        };
        for j in (0..n).rev() {
            let r = s.l_ptr[j]..s.l_ptr[j + 1];
            let rows = &self.l_idx[r.clone()];
            let vals = &self.l_val[r.clone()];
            let mut col = vec![0.0; rows.len()];
            for (a, &i) in rows.iter().enumerate() {
                let mut acc = 0.0;
                for (&k, &lkj) in rows.iter().zip(vals) {
                    acc -= lkj * lookup(&diag, &off, i, k);
                }
                col[a] = acc;
            }
            let mut dj = 1.0 / self.d[j];
            for (a, &lkj) in vals.iter().enumerate() {
                dj -= lkj * col[a];
            }
            diag[j] = dj;
            off[r].copy_from_slice(&col);
        }
        SelectedInverse {
            symbolic: Arc::clone(&self.symbolic),
            l_idx: self.l_idx.clone(),
            diag,
            off,
        }
    }
}

/// Entries of the inverse of a factored matrix on the filled pattern.
#[derive(Debug, Clone)]
pub struct SelectedInverse {
    symbolic: Arc<LdlSymbolic>,
    l_idx: Vec<usize>,
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl SelectedInverse {
    /// `(A⁻¹)_ij` in original indices, if it lies on the computed pattern.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let s = &self.symbolic;
        let (a, b) = (s.iperm[i], s.iperm[j]);
        if a == b {
            return Some(self.diag[a]);
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let r = s.l_ptr[lo]..s.l_ptr[lo + 1];
        self.l_idx[r.clone()]
            .binary_search(&hi)
            .ok()
            .map(|k| self.off[r.start + k])
    }

    /// Diagonal of `A⁻¹` in original indices.
    pub fn diagonal(&self) -> Vec<f64> {
        let s = &self.symbolic;
        (0..self.diag.len()).map(|i| self.diag[s.iperm[i]]).collect()
    }
}
