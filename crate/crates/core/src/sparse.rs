//! Sparse symmetric and rectangular matrices, and a supernodal-free
//! up-looking sparse Cholesky factorisation.
//!
//! [`SparseSym`] stores only the upper triangle in compressed-column form.
//! [`SparseMatrix`] is a general compressed-row matrix used for design and
//! Jacobian matrices, where row access dominates.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Symmetric sparse matrix, upper triangle in compressed-column storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSym {
    /// Builds a canonical matrix from `(row, col, value)` triplets.
    ///
    /// Lower-triangle entries are mirrored into the upper triangle and
    /// duplicates are summed, so `(0,1,3)` together with `(1,0,3)` yields a
    /// single stored entry of 6.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        let mut entries = Vec::with_capacity(triplets.len());
        for &(r, c, v) in triplets {
            if r >= n || c >= n {
                return Err(Error::IndexOutOfRange { row: r, col: c, n });
            }
            if !v.is_finite() {
                return Err(Error::NonFinite { row: r, col: c, value: v });
            }
            let (i, j) = if r <= c { (r, c) } else { (c, r) };
            entries.push((j, i, v));
        }
        Ok(Self::from_sorted_upper(n, entries))
    }

    // entries are (col, row, value) with row <= col; sorted and merged here.
    fn from_sorted_upper(n: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by_key(|e| (e.0, e.1));
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (c, r, v) in entries {
            if last == Some((c, r)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((c, r));
            }
        }
        for j in 0..n {
            col_ptr[j + 1] += col_ptr[j];
        }
        SparseSym { n, col_ptr, row_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        SparseSym {
            n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: d.to_vec(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates stored upper-triangle entries as `(row, col, value)`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |j| {
            (self.col_ptr[j]..self.col_ptr[j + 1]).map(move |p| (self.row_idx[p], j, self.values[p]))
        })
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.iter().collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        let rows = &self.row_idx[self.col_ptr[c]..self.col_ptr[c + 1]];
        match rows.binary_search(&r) {
            Ok(p) => self.values[self.col_ptr[c] + p],
            Err(_) => 0.0,
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for (i, j, v) in self.iter() {
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
        y
    }

    /// `xᵀ M x`
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.iter()
            .map(|(i, j, v)| if i == j { v * x[i] * x[i] } else { 2.0 * v * x[i] * x[j] })
            .sum()
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// Sum of two matrices of equal dimension; the pattern is the union.
    pub fn add(&self, other: &SparseSym) -> Result<Self> {
        if other.n != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: other.n });
        }
        let entries = self
            .iter()
            .chain(other.iter())
            .map(|(i, j, v)| (j, i, v))
            .collect();
        Ok(Self::from_sorted_upper(self.n, entries))
    }

    pub fn add_diagonal(&self, d: &[f64]) -> Result<Self> {
        self.add(&SparseSym::diagonal(d))
    }

    pub fn block_diag(blocks: &[SparseSym]) -> Self {
        let n: usize = blocks.iter().map(|b| b.n).sum();
        let mut entries = Vec::new();
        let mut off = 0;
        for b in blocks {
            entries.extend(b.iter().map(|(i, j, v)| (j + off, i + off, v)));
            off += b.n;
        }
        Self::from_sorted_upper(n, entries)
    }

    /// Kronecker product `a ⊗ b`; index `ia * b.n + ib`.
    pub fn kron(a: &SparseSym, b: &SparseSym) -> Self {
        let n = a.n * b.n;
        let da = a.to_dense();
        let mut entries = Vec::new();
        for ia in 0..a.n {
            for ja in 0..a.n {
                let va = da[ia][ja];
                if va == 0.0 {
                    continue;
                }
                for (ib, jb, vb) in b.iter() {
                    let (r, c) = (ia * b.n + ib, ja * b.n + jb);
                    if r <= c {
                        entries.push((c, r, va * vb));
                    }
                    if ib != jb {
                        let (r, c) = (ia * b.n + jb, ja * b.n + ib);
                        if r <= c {
                            entries.push((c, r, va * vb));
                        }
                    }
                }
            }
        }
        Self::from_sorted_upper(n, entries)
    }

    /// Dense row-major copy (full symmetric).
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, j, v) in self.iter() {
            d[i][j] = v;
            d[j][i] = v;
        }
        d
    }

    fn same_pattern(&self, other: &SparseSym) -> bool {
        self.n == other.n && self.col_ptr == other.col_ptr && self.row_idx == other.row_idx
    }
}

/// Compressed-row rectangular sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut entries = Vec::with_capacity(triplets.len());
        for &(r, c, v) in triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::IndexOutOfRange { row: r, col: c, n: nrows.max(ncols) });
            }
            if !v.is_finite() {
                return Err(Error::NonFinite { row: r, col: c, value: v });
            }
            entries.push((r, c, v));
        }
        Ok(Self::from_entries(nrows, ncols, entries))
    }

    fn from_entries(nrows: usize, ncols: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by_key(|e| (e.0, e.1));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseMatrix { nrows, ncols, row_ptr, col_idx, values }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SparseMatrix { nrows, ncols, row_ptr: vec![0; nrows + 1], col_idx: vec![], values: vec![] }
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Single-column matrix holding `x`.
    pub fn column(x: &[f64]) -> Self {
        let n = x.len();
        SparseMatrix { nrows: n, ncols: 1, row_ptr: (0..=n).collect(), col_idx: vec![0; n], values: x.to_vec() }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|p| vals[p]).unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |p| (i, self.col_idx[p], self.values[p]))
        })
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols, "matrix-vector dimension mismatch");
        (0..self.nrows)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
            })
            .collect()
    }

    /// `Aᵀ x`
    pub fn tmul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows, "transpose-vector dimension mismatch");
        let mut y = vec![0.0; self.ncols];
        for (i, j, v) in self.iter() {
            y[j] += v * x[i];
        }
        y
    }

    /// `diag(d) · A`
    pub fn scale_rows(&self, d: &[f64]) -> Self {
        assert_eq!(d.len(), self.nrows);
        let mut out = self.clone();
        for i in 0..self.nrows {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                out.values[p] *= d[i];
            }
        }
        out
    }

    /// `A · B`
    pub fn matmul(&self, other: &SparseMatrix) -> Result<Self> {
        if self.ncols != other.nrows {
            return Err(Error::DimensionMismatch { expected: self.ncols, got: other.nrows });
        }
        let mut entries = Vec::new();
        for i in 0..self.nrows {
            let (ca, va) = self.row(i);
            for (&k, &a) in ca.iter().zip(va) {
                let (cb, vb) = other.row(k);
                entries.extend(cb.iter().zip(vb).map(|(&j, &b)| (i, j, a * b)));
            }
        }
        Ok(Self::from_entries(self.nrows, other.ncols, entries))
    }

    /// Horizontal concatenation `[A₁ A₂ …]`.
    pub fn hstack(blocks: &[SparseMatrix]) -> Result<Self> {
        let nrows = blocks.first().map_or(0, |b| b.nrows);
        let mut entries = Vec::new();
        let mut off = 0;
        for b in blocks {
            if b.nrows != nrows {
                return Err(Error::DimensionMismatch { expected: nrows, got: b.nrows });
            }
            entries.extend(b.iter().map(|(i, j, v)| (i, j + off, v)));
            off += b.ncols;
        }
        Ok(Self::from_entries(nrows, off, entries))
    }

    /// Vertical concatenation.
    pub fn vstack(blocks: &[SparseMatrix]) -> Result<Self> {
        let ncols = blocks.first().map_or(0, |b| b.ncols);
        let mut entries = Vec::new();
        let mut off = 0;
        for b in blocks {
            if b.ncols != ncols {
                return Err(Error::DimensionMismatch { expected: ncols, got: b.ncols });
            }
            entries.extend(b.iter().map(|(i, j, v)| (i + off, j, v)));
            off += b.nrows;
        }
        Ok(Self::from_entries(off, ncols, entries))
    }

    /// Embeds the columns into a wider matrix at column offset `off`.
    pub fn widen(&self, off: usize, ncols: usize) -> Self {
        assert!(off + self.ncols <= ncols);
        let mut out = self.clone();
        out.col_idx.iter_mut().for_each(|c| *c += off);
        out.ncols = ncols;
        out
    }

    /// `Aᵀ diag(w) A` as a symmetric matrix; `n` fixes the dimension.
    pub fn weighted_gram(&self, w: &[f64]) -> SparseSym {
        assert_eq!(w.len(), self.nrows);
        let mut entries = Vec::new();
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for a in 0..c.len() {
                for b in a..c.len() {
                    let (ka, kb) = (c[a], c[b]);
                    let (r, col) = if ka <= kb { (ka, kb) } else { (kb, ka) };
                    entries.push((col, r, w[i] * v[a] * v[b]));
                }
            }
        }
        SparseSym::from_sorted_upper(self.ncols.max(1), entries)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, j, v) in self.iter() {
            d[i][j] += v;
        }
        d
    }
}

/// Fill-reducing ordering and elimination tree for a fixed sparsity pattern.
#[derive(Debug, Clone)]
pub struct SymbolicChol {
    pattern: SparseSym,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    parent: Vec<Option<usize>>,
    l_col_ptr: Vec<usize>,
    // position of each entry of `pattern` inside the permuted upper CSC
    c_col_ptr: Vec<usize>,
    c_row_idx: Vec<usize>,
    c_map: Vec<usize>,
}

impl SymbolicChol {
    pub fn analyse(m: &SparseSym) -> Self {
        let n = m.n;
        let perm = minimum_degree(m);
        let mut iperm = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            iperm[p] = k;
        }
        // permuted upper pattern, remembering where each source entry lands
        let mut entries: Vec<(usize, usize, usize)> = m
            .iter()
            .enumerate()
            .map(|(src, (i, j, _))| {
                let (a, b) = (iperm[i], iperm[j]);
                if a <= b { (b, a, src) } else { (a, b, src) }
            })
            .collect();
        entries.sort_unstable();
        let mut c_col_ptr = vec![0usize; n + 1];
        let mut c_row_idx = Vec::with_capacity(entries.len());
        let mut c_map = vec![0usize; entries.len()];
        for (dst, &(c, r, src)) in entries.iter().enumerate() {
            c_col_ptr[c + 1] += 1;
            c_row_idx.push(r);
            c_map[src] = dst;
        }
        for j in 0..n {
            c_col_ptr[j + 1] += c_col_ptr[j];
        }
        let parent = etree(n, &c_col_ptr, &c_row_idx);
        let mut counts = vec![1usize; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![false; n];
        for k in 0..n {
            let top = ereach(k, &c_col_ptr, &c_row_idx, &parent, &mut stack, &mut mark);
            for &i in &stack[top..] {
                counts[i] += 1;
            }
        }
        let mut l_col_ptr = vec![0usize; n + 1];
        for j in 0..n {
            l_col_ptr[j + 1] = l_col_ptr[j] + counts[j];
        }
        SymbolicChol { pattern: m.clone(), perm, iperm, parent, l_col_ptr, c_col_ptr, c_row_idx, c_map }
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    /// Numeric factorisation. Falls back to a fresh analysis when `m` does
    /// not share the analysed pattern.
    pub fn factor(&self, m: &SparseSym) -> Result<CholFactor> {
        if !self.pattern.same_pattern(m) {
            return SymbolicChol::analyse(m).factor(m);
        }
        let n = self.n();
        let mut c_vals = vec![0.0; m.nnz()];
        for (src, &v) in m.values.iter().enumerate() {
            c_vals[self.c_map[src]] += v;
        }
        let lnz = self.l_col_ptr[n];
        let mut l_row = vec![0usize; lnz];
        let mut l_val = vec![0.0; lnz];
        let mut fill: Vec<usize> = self.l_col_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![false; n];
        let mut log_det = 0.0;
        for k in 0..n {
            let top = ereach(k, &self.c_col_ptr, &self.c_row_idx, &self.parent, &mut stack, &mut mark);
            for p in self.c_col_ptr[k]..self.c_col_ptr[k + 1] {
                x[self.c_row_idx[p]] += c_vals[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / l_val[self.l_col_ptr[i]];
                x[i] = 0.0;
                for p in self.l_col_ptr[i] + 1..fill[i] {
                    x[l_row[p]] -= l_val[p] * lki;
                }
                d -= lki * lki;
                let p = fill[i];
                fill[i] += 1;
                l_row[p] = k;
                l_val[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: self.perm[k], value: d });
            }
            let p = fill[k];
            fill[k] += 1;
            l_row[p] = k;
            l_val[p] = d.sqrt();
            log_det += d.ln();
        }
        Ok(CholFactor {
            n,
            perm: self.perm.clone(),
            iperm: self.iperm.clone(),
            l_col_ptr: self.l_col_ptr.clone(),
            l_row,
            l_val,
            log_det,
        })
    }
}

fn etree(n: usize, col_ptr: &[usize], row_idx: &[usize]) -> Vec<Option<usize>> {
    let mut parent = vec![None; n];
    let mut ancestor: Vec<Option<usize>> = vec![None; n];
    for k in 0..n {
        for &r in &row_idx[col_ptr[k]..col_ptr[k + 1]] {
            let mut i = Some(r);
            while let Some(ii) = i {
                if ii >= k {
                    break;
                }
                let next = ancestor[ii];
                ancestor[ii] = Some(k);
                if next.is_none() {
                    parent[ii] = Some(k);
                }
                i = next;
            }
        }
    }
    parent
}

// Nonzero pattern of row k of L, returned in stack[top..] in topological order.
fn ereach(
    k: usize,
    col_ptr: &[usize],
    row_idx: &[usize],
    parent: &[Option<usize>],
    stack: &mut [usize],
    mark: &mut [bool],
) -> usize {
    let n = parent.len();
    let mut top = n;
    mark[k] = true;
    let mut path = Vec::new();
    for &r in &row_idx[col_ptr[k]..col_ptr[k + 1]] {
        if r > k {
            continue;
        }
        let mut i = r;
        path.clear();
        while !mark[i] {
            path.push(i);
            mark[i] = true;
            match parent[i] {
                Some(p) => i = p,
                None => break,
            }
        }
        while let Some(i) = path.pop() {
            top -= 1;
            stack[top] = i;
        }
    }
    for &i in &stack[top..] {
        mark[i] = false;
    }
    mark[k] = false;
    top
}

/// Greedy minimum-degree ordering on the explicit elimination graph.
/// Ties go to the smallest index, so the result is deterministic.
fn minimum_degree(m: &SparseSym) -> Vec<usize> {
    let n = m.n;
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (i, j, _) in m.iter() {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    let mut alive = vec![true; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&v| alive[v])
            .min_by_key(|&v| (adj[v].len(), v))
            .expect("at least one node remains");
        alive[v] = false;
        order.push(v);
        let nbrs: Vec<usize> = adj[v].iter().copied().collect();
        for &a in &nbrs {
            adj[a].remove(&v);
        }
        for (x, &a) in nbrs.iter().enumerate() {
            for &b in &nbrs[x + 1..] {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        adj[v].clear();
    }
    order
}

/// Cholesky factor `P A Pᵀ = L Lᵀ` with its log-determinant.
#[derive(Debug, Clone)]
pub struct CholFactor {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    l_col_ptr: Vec<usize>,
    l_row: Vec<usize>,
    l_val: Vec<f64>,
    log_det: f64,
}

/// Factorises a symmetric positive definite matrix.
pub fn chol(m: &SparseSym) -> Result<CholFactor> {
    SymbolicChol::analyse(m).factor(m)
}

impl CholFactor {
    pub fn n(&self) -> usize {
        self.n
    }

    /// `ln det A`
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn nnz(&self) -> usize {
        self.l_val.len()
    }

    // L y = b in place
    fn lsolve(&self, y: &mut [f64]) {
        for j in 0..self.n {
            let p0 = self.l_col_ptr[j];
            y[j] /= self.l_val[p0];
            let yj = y[j];
            for p in p0 + 1..self.l_col_ptr[j + 1] {
                y[self.l_row[p]] -= self.l_val[p] * yj;
            }
        }
    }

    // Lᵀ x = y in place
    fn ltsolve(&self, y: &mut [f64]) {
        for j in (0..self.n).rev() {
            let p0 = self.l_col_ptr[j];
            let mut s = y[j];
            for p in p0 + 1..self.l_col_ptr[j + 1] {
                s -= self.l_val[p] * y[self.l_row[p]];
            }
            y[j] = s / self.l_val[p0];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: b.len() });
        }
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        self.lsolve(&mut y);
        self.ltsolve(&mut y);
        Ok((0..self.n).map(|i| y[self.iperm[i]]).collect())
    }

    /// `Pᵀ L⁻ᵀ z`: maps standard normals to a draw with covariance `A⁻¹`.
    pub fn solve_lt(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: z.len() });
        }
        let mut y = z.to_vec();
        self.ltsolve(&mut y);
        Ok((0..self.n).map(|i| y[self.iperm[i]]).collect())
    }

    /// Diagonal of `A⁻¹`, by one solve per unit vector.
    pub fn diag_inverse(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.n];
        (0..self.n)
            .map(|j| {
                e[j] = 1.0;
                let x = self.solve(&e).expect("dimension checked");
                e[j] = 0.0;
                x[j]
            })
            .collect()
    }

    /// Column `j` of `A⁻¹`.
    pub fn inverse_column(&self, j: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.n];
        e[j] = 1.0;
        self.solve(&e).expect("dimension checked")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> (SparseSym, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * a.transpose() + DMatrix::identity(n, n) * 5.0;
        let mut t = Vec::new();
        for i in 0..n {
            for j in i..n {
                t.push((i, j, m[(i, j)]));
            }
        }
        (SparseSym::from_triplets(n, &t).unwrap(), m)
    }

    fn rw1(n: usize) -> SparseSym {
        let mut t = Vec::new();
        for i in 0..n - 1 {
            t.push((i, i, 1.0));
            t.push((i + 1, i + 1, 1.0));
            t.push((i, i + 1, -1.0));
        }
        SparseSym::from_triplets(n, &t).unwrap()
    }

    #[test]
    fn identity_from_triplets() {
        let m = SparseSym::from_triplets(2, &[(0, 0, 1.0), (1, 1, 1.0)]).unwrap();
        assert_eq!(m, SparseSym::identity(2));
    }

    #[test]
    fn mirrored_duplicates_sum() {
        let m = SparseSym::from_triplets(2, &[(0, 1, 3.0), (1, 0, 3.0)]).unwrap();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.triplets(), vec![(0, 1, 6.0)]);
    }

    #[test]
    fn path_icar_round_trips_dense() {
        let m = SparseSym::from_triplets(
            3,
            &[(0, 0, 1.0), (1, 1, 2.0), (2, 2, 1.0), (0, 1, -1.0), (1, 2, -1.0)],
        )
        .unwrap();
        let d = m.to_dense();
        let mut t = Vec::new();
        for (i, row) in d.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if j >= i && v != 0.0 {
                    t.push((i, j, v));
                }
            }
        }
        assert_eq!(SparseSym::from_triplets(3, &t).unwrap(), m);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d[i][j], d[j][i]);
            }
        }
    }

    #[test]
    fn triplet_errors() {
        assert!(matches!(
            SparseSym::from_triplets(2, &[(2, 0, 1.0)]),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            SparseSym::from_triplets(2, &[(0, 0, f64::NAN)]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn diagonal_log_det() {
        let f = chol(&SparseSym::diagonal(&[4.0, 9.0])).unwrap();
        assert!((f.log_det() - 36f64.ln()).abs() < 1e-14);
        assert!((f.log_det() - 3.58352).abs() < 1e-5);
        assert_eq!(chol(&SparseSym::identity(3)).unwrap().log_det(), 0.0);
    }

    #[test]
    fn log_det_matches_eigenvalues() {
        let (m, dense) = random_spd(5, 11);
        let eig = dense.symmetric_eigen();
        let expected: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
        let f = chol(&m).unwrap();
        assert!((f.log_det() - expected).abs() < 1e-10 * expected.abs().max(1.0));
    }

    #[test]
    fn solves() {
        let f = chol(&SparseSym::identity(3)).unwrap();
        assert_eq!(f.solve(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let f = chol(&SparseSym::diagonal(&[2.0, 4.0])).unwrap();
        for v in f.solve(&[2.0, 4.0]).unwrap() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        assert!(matches!(f.solve(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn rw1_ridge_solve_matches_dense() {
        let n = 8;
        let q = rw1(n).add_diagonal(&vec![0.01; n]).unwrap();
        let x = chol(&q).unwrap().solve(&vec![1.0; n]).unwrap();
        let d = q.to_dense();
        let dm = DMatrix::from_fn(n, n, |i, j| d[i][j]);
        let expected = dm.lu().solve(&nalgebra::DVector::from_element(n, 1.0)).unwrap();
        for i in 0..n {
            assert!((x[i] - expected[i]).abs() < 1e-10 * expected[i].abs().max(1.0));
        }
    }

    #[test]
    fn diag_inverse_cases() {
        let f = chol(&SparseSym::diagonal(&[2.0, 4.0])).unwrap();
        let d = f.diag_inverse();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.25).abs() < 1e-15);
        assert_eq!(chol(&SparseSym::identity(5)).unwrap().diag_inverse(), vec![1.0; 5]);
        let (m, dense) = random_spd(6, 3);
        let inv = dense.try_inverse().unwrap();
        let di = chol(&m).unwrap().diag_inverse();
        for i in 0..6 {
            assert!((di[i] - inv[(i, i)]).abs() < 1e-10);
        }
    }

    #[test]
    fn not_positive_definite_names_pivot() {
        let m = SparseSym::diagonal(&[1.0, -2.0, 3.0]);
        match chol(&m) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reconstructs_permuted_input() {
        let (m, dense) = random_spd(7, 5);
        let f = chol(&m).unwrap();
        let n = 7;
        let mut l = DMatrix::zeros(n, n);
        for j in 0..n {
            for p in f.l_col_ptr[j]..f.l_col_ptr[j + 1] {
                l[(f.l_row[p], j)] = f.l_val[p];
            }
        }
        let llt = &l * l.transpose();
        let scale = dense.norm();
        for a in 0..n {
            for b in 0..n {
                let orig = dense[(f.perm[a], f.perm[b])];
                assert!((llt[(a, b)] - orig).abs() < 1e-10 * scale);
            }
        }
        let ld: f64 = (0..n).map(|j| 2.0 * l[(j, j)].ln()).sum();
        assert!((ld - f.log_det()).abs() < 1e-12);
    }

    #[test]
    fn sparse_lattice_fill_and_solve() {
        // 6x6 lattice ICAR plus ridge, plus a dense coupling row
        let side = 6;
        let n = side * side + 1;
        let mut t = Vec::new();
        for r in 0..side {
            for c in 0..side {
                let i = r * side + c;
                let mut nb = vec![];
                if c + 1 < side {
                    nb.push(i + 1);
                }
                if r + 1 < side {
                    nb.push(i + side);
                }
                for j in nb {
                    t.push((i, i, 1.0));
                    t.push((j, j, 1.0));
                    t.push((i, j, -1.0));
                }
                t.push((i, i, 0.1));
                t.push((i, n - 1, 0.05));
            }
        }
        t.push((n - 1, n - 1, 10.0));
        let q = SparseSym::from_triplets(n, &t).unwrap();
        let f = chol(&q).unwrap();
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let b = q.mul_vec(&x);
        let y = f.solve(&b).unwrap();
        for i in 0..n {
            assert!((x[i] - y[i]).abs() < 1e-9);
        }
        // factor of the same pattern with new values reuses the symbolic step
        let sym = SymbolicChol::analyse(&q);
        let q2 = q.scale(3.0);
        let f2 = sym.factor(&q2).unwrap();
        assert!((f2.log_det() - (f.log_det() + n as f64 * 3f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn rectangular_ops() {
        let a = SparseMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0)]).unwrap();
        assert_eq!(a.mul_vec(&[1.0, 1.0, 1.0]), vec![3.0, 3.0]);
        assert_eq!(a.tmul_vec(&[1.0, 2.0]), vec![1.0, 6.0, 2.0]);
        let g = a.weighted_gram(&[1.0, 2.0]);
        assert_eq!(g.get(0, 2), 2.0);
        assert_eq!(g.get(2, 2), 4.0);
        assert_eq!(g.get(1, 1), 18.0);
        let h = SparseMatrix::hstack(&[a.clone(), SparseMatrix::identity(2)]).unwrap();
        assert_eq!(h.ncols(), 5);
        assert_eq!(h.get(1, 4), 1.0);
        let p = SparseMatrix::identity(2).matmul(&a).unwrap();
        assert_eq!(p, a);
    }

    #[test]
    fn kron_matches_dense() {
        let a = SparseSym::from_triplets(2, &[(0, 0, 2.0), (0, 1, -1.0), (1, 1, 2.0)]).unwrap();
        let b = SparseSym::from_triplets(2, &[(0, 0, 1.0), (0, 1, 0.5), (1, 1, 3.0)]).unwrap();
        let k = SparseSym::kron(&a, &b).to_dense();
        let (da, db) = (a.to_dense(), b.to_dense());
        for ia in 0..2 {
            for ja in 0..2 {
                for ib in 0..2 {
                    for jb in 0..2 {
                        assert_eq!(k[ia * 2 + ib][ja * 2 + jb], da[ia][ja] * db[ib][jb]);
                    }
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest};

        proptest! {
            #[test]
            fn solve_inverts_multiply(seed in 0u64..1000, n in 1usize..12) {
                let (m, _) = random_spd(n, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let y = chol(&m).unwrap().solve(&m.mul_vec(&x)).unwrap();
                let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                let err: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                prop_assert!(err / norm < 1e-9);
            }

            #[test]
            fn scaled_identity_log_det(n in 1usize..30, c in 0.01f64..100.0) {
                let f = chol(&SparseSym::identity(n).scale(c)).unwrap();
                prop_assert!((f.log_det() - n as f64 * c.ln()).abs() < 1e-10 * (n as f64));
            }

            #[test]
            fn diag_inverse_matches_dense(seed in 0u64..500, n in 1usize..20) {
                let (m, dense) = random_spd(n, seed);
                let inv = dense.try_inverse().unwrap();
                let f = chol(&m).unwrap();
                let di = f.diag_inverse();
                for j in 0..n {
                    prop_assert!((di[j] - inv[(j, j)]).abs() < 1e-10);
                    prop_assert!((f.inverse_column(j)[j] - di[j]).abs() < 1e-15);
                }
            }
        }
    }
}
