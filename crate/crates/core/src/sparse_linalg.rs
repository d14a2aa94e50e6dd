//! Sparse symmetric storage, reverse Cuthill-McKee reordering, envelope
//! (variable-band) Cholesky, and block-diagonal dense factorizations.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric sparse matrix holding only its upper triangle, column by column.
#[derive(Clone, Debug, PartialEq)]
pub struct SymSparse {
    n: usize,
    /// `cols[j]` lists `(i, a_ij)` for stored `i <= j`, sorted by `i`.
    cols: Vec<Vec<(usize, f64)>>,
}

impl SymSparse {
    /// Builds from `(i, j, value)` triplets; either triangle may be given,
    /// duplicates are summed and zeros are dropped.
    pub fn from_triplets<I>(n: usize, triplets: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(Error::InvalidInput(format!("entry ({i}, {j}) out of range for n = {n}")));
            }
            let (r, c) = if i <= j { (i, j) } else { (j, i) };
            cols[c].push((r, v));
        }
        for col in &mut cols {
            col.sort_by_key(|e| e.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(col.len());
            for &(r, v) in col.iter() {
                match merged.last_mut() {
                    Some(last) if last.0 == r => last.1 += v,
                    _ => merged.push((r, v)),
                }
            }
            merged.retain(|e| e.1 != 0.0);
            *col = merged;
        }
        Ok(Self { n, cols })
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::InvalidInput("matrix must be square".into()));
        }
        let n = a.nrows();
        Self::from_triplets(n, (0..n).flat_map(|j| (0..=j).map(move |i| (i, j, a[(i, j)]))))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Stored (upper-triangle) nonzeros.
    pub fn nnz(&self) -> usize {
        self.cols.iter().map(Vec::len).sum()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        self.cols[c]
            .binary_search_by_key(&r, |e| e.0)
            .map(|pos| self.cols[c][pos].1)
            .unwrap_or(0.0)
    }

    /// Stored entries as `(row, col, value)` with `row <= col`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.cols
            .iter()
            .enumerate()
            .flat_map(|(j, col)| col.iter().map(move |&(i, v)| (i, j, v)))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.iter() {
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
        a
    }

    /// Off-diagonal neighbor lists of the matrix graph.
    pub fn graph(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for (i, j, _) in self.iter() {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    /// `P A P^T`, i.e. entry `(new_i, new_j)` is `a[perm[new_i], perm[new_j]]`.
    pub fn permute(&self, perm: &Permutation) -> SymSparse {
        let inv = perm.inverse();
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n];
        for (i, j, v) in self.iter() {
            let (a, b) = (inv[i], inv[j]);
            let (r, c) = if a <= b { (a, b) } else { (b, a) };
            cols[c].push((r, v));
        }
        for col in &mut cols {
            col.sort_by_key(|e| e.0);
        }
        SymSparse { n: self.n, cols }
    }

    pub fn mean_diagonal(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        (0..self.n).map(|i| self.get(i, i)).sum::<f64>() / self.n as f64
    }

    /// Writes the pattern in MatrixMarket coordinate form (lower triangle, 1-based).
    pub fn write_matrix_market<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "%%MatrixMarket matrix coordinate real symmetric")?;
        writeln!(out, "{} {} {}", self.n, self.n, self.nnz())?;
        for (i, j, v) in self.iter() {
            writeln!(out, "{} {} {:e}", j + 1, i + 1, v)?;
        }
        Ok(())
    }
}

/// Largest `|i - j|` over stored nonzeros.
pub fn bandwidth(a: &SymSparse) -> usize {
    a.iter().map(|(i, j, _)| j - i).max().unwrap_or(0)
}

/// Reordering with `forward[new] = old`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    forward: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self {
            forward: (0..n).collect(),
        }
    }

    pub fn new(forward: Vec<usize>) -> Result<Self> {
        let p = Self { forward };
        if !p.is_bijection() {
            return Err(Error::InvalidInput("permutation is not a bijection".into()));
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    /// `inverse[old] = new`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.forward.len()];
        for (new, &old) in self.forward.iter().enumerate() {
            inv[old] = new;
        }
        inv
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.forward.len()];
        for &old in &self.forward {
            if old >= seen.len() || seen[old] {
                return false;
            }
            seen[old] = true;
        }
        true
    }

    /// `(P b)[new] = b[forward[new]]`.
    pub fn apply(&self, b: &[f64]) -> Vec<f64> {
        self.forward.iter().map(|&old| b[old]).collect()
    }

    /// Inverse of [`Permutation::apply`].
    pub fn apply_inverse(&self, b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; b.len()];
        for (new, &old) in self.forward.iter().enumerate() {
            out[old] = b[new];
        }
        out
    }
}

/// Reverse Cuthill-McKee ordering of the graph of `a`, started in each
/// connected component from a pseudo-peripheral vertex (George-Liu).
/// Falls back to the identity if the reordering would widen the band.
pub fn rcm_order(a: &SymSparse) -> Permutation {
    let adj = a.graph();
    let n = adj.len();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    let mut scratch = vec![usize::MAX; n];

    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(&adj, &degree, seed, &mut scratch);
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (degree[u], u));
            for u in next {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    let perm = Permutation { forward: order };
    if bandwidth(&a.permute(&perm)) > bandwidth(a) {
        Permutation::identity(n)
    } else {
        perm
    }
}

/// Breadth-first level sets from `root`; returns (eccentricity, last level).
fn level_structure(adj: &[Vec<usize>], root: usize, level: &mut [usize]) -> (usize, Vec<usize>) {
    let mut touched = vec![root];
    level[root] = 0;
    let mut frontier = vec![root];
    let mut depth = 0;
    loop {
        let mut next = Vec::new();
        for &v in &frontier {
            for &u in &adj[v] {
                if level[u] == usize::MAX {
                    level[u] = depth + 1;
                    touched.push(u);
                    next.push(u);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        depth += 1;
        frontier = next;
    }
    for v in touched {
        level[v] = usize::MAX;
    }
    (depth, frontier)
}

fn pseudo_peripheral(adj: &[Vec<usize>], degree: &[usize], seed: usize, scratch: &mut [usize]) -> usize {
    let mut root = seed;
    let (mut ecc, mut last) = level_structure(adj, root, scratch);
    loop {
        let candidate = *last
            .iter()
            .min_by_key(|&&v| (degree[v], v))
            .expect("level sets are nonempty");
        let (cand_ecc, cand_last) = level_structure(adj, candidate, scratch);
        if cand_ecc > ecc {
            root = candidate;
            ecc = cand_ecc;
            last = cand_last;
        } else {
            return root;
        }
    }
}

/// Lower-triangular Cholesky factor stored by rows within the envelope of
/// the input matrix: row `i` keeps columns `first[i]..=i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCholesky {
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

/// Cholesky factor of `a + jitter * I` in the given ordering. Fill-in is
/// confined to the envelope of `a`.
pub fn chol_sparse(a: &SymSparse, jitter: f64) -> Result<EnvelopeCholesky> {
    let n = a.n();
    let first: Vec<usize> = (0..n)
        .map(|i| a.cols[i].first().map_or(i, |e| e.0.min(i)))
        .collect();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let fi = first[i];
        let mut row = vec![0.0; i - fi + 1];
        for &(r, v) in &a.cols[i] {
            row[r - fi] = v;
        }
        row[i - fi] += jitter;
        for j in fi..i {
            let fj = first[j];
            let lo = fi.max(fj);
            let lj = &rows[j];
            let mut s = row[j - fi];
            for k in lo..j {
                s -= row[k - fi] * lj[k - fj];
            }
            row[j - fi] = s / lj[j - fj];
        }
        let off = &row[..i - fi];
        let pivot = row[i - fi] - off.iter().map(|x| x * x).sum::<f64>();
        if !(pivot > 0.0 && pivot.is_finite()) {
            return Err(Error::NotPositiveDefinite { pivot: i, value: pivot });
        }
        row[i - fi] = pivot.sqrt();
        rows.push(row);
    }
    Ok(EnvelopeCholesky { first, rows })
}

impl EnvelopeCholesky {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub(crate) fn first(&self) -> &[usize] {
        &self.first
    }

    /// Envelope values row after row.
    pub(crate) fn flat_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().flatten().copied()
    }

    pub(crate) fn from_parts(first: Vec<usize>, values: &[f64]) -> Result<Self> {
        let mut rows = Vec::with_capacity(first.len());
        let mut at = 0;
        for (i, &f) in first.iter().enumerate() {
            if f > i || at + (i - f + 1) > values.len() {
                return Err(Error::Bundle("malformed envelope factor".into()));
            }
            rows.push(values[at..at + i - f + 1].to_vec());
            at += i - f + 1;
        }
        if at != values.len() {
            return Err(Error::Bundle("malformed envelope factor".into()));
        }
        Ok(Self { first, rows })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i || j < self.first[i] {
            0.0
        } else {
            self.rows[i][j - self.first[i]]
        }
    }

    /// Entries held inside the envelope, including explicit fill.
    pub fn stored(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn bandwidth(&self) -> usize {
        self.first.iter().enumerate().map(|(i, &f)| i - f).max().unwrap_or(0)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.n(), |i, j| self.get(i, j))
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self
            .rows
            .iter()
            .zip(&self.first)
            .enumerate()
            .map(|(i, (row, &f))| row[i - f].ln())
            .sum::<f64>()
    }

    /// Solves `L x = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let start = b.iter().position(|&v| v != 0.0).unwrap_or(b.len());
        for i in start..b.len() {
            let f = self.first[i];
            let row = &self.rows[i];
            let lo = f.max(start);
            let mut s = b[i];
            for k in lo..i {
                s -= row[k - f] * b[k];
            }
            b[i] = s / row[i - f];
        }
    }

    /// Solves `L^T x = b` in place.
    pub fn backward_in_place(&self, b: &mut [f64]) {
        for i in (0..b.len()).rev() {
            let f = self.first[i];
            let row = &self.rows[i];
            let xi = b[i] / row[i - f];
            b[i] = xi;
            if xi != 0.0 {
                for k in f..i {
                    b[k] -= row[k - f] * xi;
                }
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_in_place(&mut x);
        self.backward_in_place(&mut x);
        x
    }
}

/// Envelope Cholesky of `P (A + jitter I) P^T` with an RCM permutation `P`.
///
/// Writing `L_c = P^T L`, the factor satisfies `L_c L_c^T = A + jitter I`;
/// [`SparseCholesky::half_solve`] applies `L_c^{-1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseCholesky {
    perm: Permutation,
    factor: EnvelopeCholesky,
}

impl SparseCholesky {
    pub(crate) fn from_parts(perm: Permutation, factor: EnvelopeCholesky) -> Result<Self> {
        if perm.len() != factor.n() {
            return Err(Error::Bundle("permutation and factor sizes differ".into()));
        }
        Ok(Self { perm, factor })
    }

    pub fn factor(a: &SymSparse, jitter: f64) -> Result<Self> {
        let perm = rcm_order(a);
        let permuted = a.permute(&perm);
        let factor = chol_sparse(&permuted, jitter).map_err(|e| match e {
            Error::NotPositiveDefinite { pivot, value } => Error::NotPositiveDefinite {
                pivot: perm.forward[pivot],
                value,
            },
            other => other,
        })?;
        Ok(Self { perm, factor })
    }

    pub fn n(&self) -> usize {
        self.factor.n()
    }

    pub fn permutation(&self) -> &Permutation {
        &self.perm
    }

    pub fn envelope(&self) -> &EnvelopeCholesky {
        &self.factor
    }

    pub fn logdet(&self) -> f64 {
        self.factor.logdet()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let x = self.factor.solve(&self.perm.apply(b));
        self.perm.apply_inverse(&x)
    }

    /// `L_c^{-1} b`, a vector in the permuted ordering.
    pub fn half_solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = self.perm.apply(b);
        self.factor.forward_in_place(&mut x);
        x
    }

    /// `L_c^{-T} z` for `z` in the permuted ordering.
    pub fn half_solve_transpose(&self, z: &[f64]) -> Vec<f64> {
        let mut x = z.to_vec();
        self.factor.backward_in_place(&mut x);
        self.perm.apply_inverse(&x)
    }

    /// `b^T (A + jitter I)^{-1} b`.
    pub fn quad_form(&self, b: &[f64]) -> f64 {
        let x = self.half_solve(b);
        x.iter().map(|v| v * v).sum()
    }
}

/// Block-diagonal matrix of dense symmetric blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDiag {
    blocks: Vec<DMatrix<f64>>,
}

impl BlockDiag {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        if let Some(k) = blocks.iter().position(|b| b.nrows() != b.ncols()) {
            return Err(Error::InvalidInput(format!("block {k} is not square")));
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.nrows()).collect()
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        let mut off = 0;
        for b in &self.blocks {
            let m = b.nrows();
            out.view_mut((off, off), (m, m)).copy_from(b);
            off += m;
        }
        out
    }
}

/// Per-block dense Cholesky factors of a [`BlockDiag`].
#[derive(Clone, Debug)]
pub struct BlockCholesky {
    factors: Vec<Cholesky<f64, Dyn>>,
    offsets: Vec<usize>,
}

impl BlockCholesky {
    pub fn new(c: &BlockDiag) -> Result<Self> {
        let factors = c
            .blocks
            .par_iter()
            .enumerate()
            .map(|(k, b)| Cholesky::new(b.clone()).ok_or(Error::SingularBlock { block: k }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_factors(factors))
    }

    /// Factors the blocks in place without copying them.
    pub fn from_owned(c: BlockDiag) -> Result<Self> {
        let factors = c
            .blocks
            .into_par_iter()
            .enumerate()
            .map(|(k, b)| Cholesky::new(b).ok_or(Error::SingularBlock { block: k }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_factors(factors))
    }

    pub(crate) fn from_factors(factors: Vec<Cholesky<f64, Dyn>>) -> Self {
        let mut offsets = Vec::with_capacity(factors.len() + 1);
        offsets.push(0);
        for f in &factors {
            offsets.push(offsets.last().unwrap() + f.l_dirty().nrows());
        }
        Self { factors, offsets }
    }

    pub fn n_blocks(&self) -> usize {
        self.factors.len()
    }

    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn block(&self, k: usize) -> &Cholesky<f64, Dyn> {
        &self.factors[k]
    }

    pub fn logdet(&self) -> f64 {
        self.factors
            .iter()
            .map(|f| 2.0 * f.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
            .sum()
    }

    /// `C^{-1} Y`, block by block.
    pub fn solve(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: y.nrows(),
            });
        }
        let mut out = y.clone();
        for (k, f) in self.factors.iter().enumerate() {
            let (lo, hi) = (self.offsets[k], self.offsets[k + 1]);
            let mut view = out.rows_mut(lo, hi - lo);
            let mut block = view.clone_owned();
            f.solve_mut(&mut block);
            view.copy_from(&block);
        }
        Ok(out)
    }

    pub fn solve_block(&self, k: usize, b: &DVector<f64>) -> DVector<f64> {
        self.factors[k].solve(b)
    }
}

/// `C^{-1} Y` for block-diagonal `C` without forming the full matrix.
pub fn blockdiag_chol_solve(c: &BlockDiag, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    BlockCholesky::new(c)?.solve(y)
}
