//! Sparse Cholesky factorization of symmetric positive definite precisions.
//!
//! The factorization is split into a symbolic phase (ordering, elimination
//! tree, fill pattern) that depends only on the sparsity pattern and a numeric
//! phase that is repeated for every new set of values. Precisions built for
//! different hyperparameter values share a pattern, so the symbolic phase is
//! cached by pattern in [`SymbolicCache`].

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::sparse::SparseSymmetric;
use crate::error::{LgmError, Result};

/// Diagonal jitter applied when a matrix fails to factorize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    /// First jitter, relative to the largest diagonal entry.
    pub initial_relative: f64,
    /// Multiplier between attempts.
    pub growth: f64,
    /// Number of jittered attempts after the plain one.
    pub max_attempts: usize,
    /// A pivot `d` is rejected when `d <= pivot_tol * |a_kk|`.
    pub pivot_tol: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self { initial_relative: 1e-5, growth: 10.0, max_attempts: 4, pivot_tol: 1e-12 }
    }
}

impl JitterPolicy {
    /// No jitter: non-positive-definite input is an error.
    pub fn none() -> Self {
        Self { max_attempts: 0, ..Self::default() }
    }
}

/// Fill-reducing ordering strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingKind {
    Natural,
    ReverseCuthillMcKee,
    /// Whichever of the two has the smaller envelope.
    #[default]
    Auto,
}

/// Pattern-only part of a factorization.
#[derive(Debug)]
pub struct Symbolic {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// Pattern of the input (for validating reuse).
    in_col_ptr: Vec<usize>,
    in_row_idx: Vec<usize>,
    /// Upper triangle of the permuted matrix in compressed-column form.
    up_col_ptr: Vec<usize>,
    up_row_idx: Vec<usize>,
    /// `up_src[p]` = index into the input values for upper entry `p`.
    up_src: Vec<usize>,
    /// Row patterns of L in topological order, per row.
    reach_ptr: Vec<usize>,
    reach: Vec<usize>,
    /// Column pattern of L (diagonal first, rows increasing).
    l_col_ptr: Vec<usize>,
    l_row_idx: Vec<usize>,
}

impl Symbolic {
    pub fn analyze(q: &SparseSymmetric, ordering: OrderingKind) -> Result<Arc<Self>> {
        let n = q.dim();
        let perm = compute_ordering(q, ordering);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }

        // Upper triangle of C = P Q Pᵀ by columns: entry (a, b) with a <= b.
        let mut counts = vec![0usize; n + 1];
        let mut entries: Vec<(usize, usize, usize)> = Vec::with_capacity(q.nnz());
        for c in 0..n {
            for p in q.col_ptr()[c]..q.col_ptr()[c + 1] {
                let r = q.row_idx()[p];
                let (a, b) = (inv[r], inv[c]);
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                entries.push((hi, lo, p));
                counts[hi + 1] += 1;
            }
        }
        for k in 0..n {
            counts[k + 1] += counts[k];
        }
        let up_col_ptr = counts.clone();
        let mut next = counts;
        let mut up_row_idx = vec![0usize; entries.len()];
        let mut up_src = vec![0usize; entries.len()];
        for &(col, row, src) in &entries {
            let p = next[col];
            next[col] += 1;
            up_row_idx[p] = row;
            up_src[p] = src;
        }

        // Elimination tree with path compression.
        let mut parent = vec![usize::MAX; n];
        let mut ancestor = vec![usize::MAX; n];
        for k in 0..n {
            for p in up_col_ptr[k]..up_col_ptr[k + 1] {
                let mut i = up_row_idx[p];
                while i != usize::MAX && i < k {
                    let inext = ancestor[i];
                    ancestor[i] = k;
                    if inext == usize::MAX {
                        parent[i] = k;
                        break;
                    }
                    i = inext;
                }
            }
        }

        // Row patterns (ereach) and column counts.
        let mut mark = vec![usize::MAX; n];
        let mut reach_ptr = Vec::with_capacity(n + 1);
        reach_ptr.push(0);
        let mut reach = Vec::new();
        let mut col_count = vec![1usize; n];
        let mut path = Vec::new();
        let mut stack = Vec::new();
        for k in 0..n {
            mark[k] = k;
            stack.clear();
            for p in up_col_ptr[k]..up_col_ptr[k + 1] {
                let mut i = up_row_idx[p];
                if i >= k {
                    continue;
                }
                path.clear();
                while mark[i] != k {
                    path.push(i);
                    mark[i] = k;
                    i = parent[i];
                }
                // path runs descendant -> ancestor; prepend it as a block
                stack.push(path.clone());
            }
            // Later blocks must precede earlier ones so that every node comes before its ancestors.
            for block in stack.iter().rev() {
                for &i in block {
                    reach.push(i);
                    col_count[i] += 1;
                }
            }
            reach_ptr.push(reach.len());
        }

        let mut l_col_ptr = vec![0usize; n + 1];
        for k in 0..n {
            l_col_ptr[k + 1] = l_col_ptr[k] + col_count[k];
        }
        let mut l_row_idx = vec![0usize; l_col_ptr[n]];
        let mut fill = l_col_ptr.clone();
        for k in 0..n {
            // Rows are appended in increasing k, so each column stays sorted with the diagonal first.
            for &i in &reach[reach_ptr[k]..reach_ptr[k + 1]] {
                l_row_idx[fill[i]] = k;
                fill[i] += 1;
            }
            l_row_idx[fill[k]] = k;
            fill[k] += 1;
        }
        // Diagonal must come first: column k receives its diagonal at step k, before any row > k.
        Ok(Arc::new(Self {
            n,
            perm,
            in_col_ptr: q.col_ptr().to_vec(),
            in_row_idx: q.row_idx().to_vec(),
            up_col_ptr,
            up_row_idx,
            up_src,
            reach_ptr,
            reach,
            l_col_ptr,
            l_row_idx,
        }))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Number of stored entries of the factor.
    pub fn factor_nnz(&self) -> usize {
        self.l_row_idx.len()
    }

    fn matches(&self, q: &SparseSymmetric) -> bool {
        q.dim() == self.n && q.col_ptr() == self.in_col_ptr && q.row_idx() == self.in_row_idx
    }
}

/// Shares symbolic analyses between factorizations of identically patterned matrices.
#[derive(Debug, Default)]
pub struct SymbolicCache {
    ordering: OrderingKind,
    capacity: usize,
    /// Least recently used first.
    entries: Mutex<VecDeque<(u64, Arc<Symbolic>)>>,
}

impl SymbolicCache {
    /// Patterns kept by [`SymbolicCache::new`].
    pub const DEFAULT_CAPACITY: usize = 2;

    pub fn new(ordering: OrderingKind) -> Self {
        Self::with_capacity(ordering, Self::DEFAULT_CAPACITY)
    }

    pub fn with_capacity(ordering: OrderingKind, capacity: usize) -> Self {
        Self { ordering, capacity: capacity.max(1), entries: Mutex::new(VecDeque::new()) }
    }

    fn lookup(entries: &mut VecDeque<(u64, Arc<Symbolic>)>, key: u64, q: &SparseSymmetric) -> Option<Arc<Symbolic>> {
        let pos = entries.iter().position(|(k, s)| *k == key && s.matches(q))?;
        let hit = entries.remove(pos)?;
        let s = Arc::clone(&hit.1);
        entries.push_back(hit);
        Some(s)
    }

    pub fn get(&self, q: &SparseSymmetric) -> Result<Arc<Symbolic>> {
        let key = q.pattern_hash();
        if let Some(s) = Self::lookup(&mut self.entries.lock().expect("symbolic cache poisoned"), key, q) {
            return Ok(s);
        }
        let s = Symbolic::analyze(q, self.ordering)?;
        let mut entries = self.entries.lock().expect("symbolic cache poisoned");
        if let Some(existing) = Self::lookup(&mut entries, key, q) {
            return Ok(existing);
        }
        entries.push_back((key, Arc::clone(&s)));
        while entries.len() > self.capacity {
            entries.pop_front();
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Numeric Cholesky factor `P Q Pᵀ = L Lᵀ` (with optional diagonal jitter).
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<Symbolic>,
    l_values: Vec<f64>,
    log_det: f64,
    jitter: f64,
}

/// Factorizes `q` with a fresh symbolic analysis.
pub fn cholesky(q: &SparseSymmetric, policy: &JitterPolicy) -> Result<CholeskyFactor> {
    let sym = Symbolic::analyze(q, OrderingKind::Auto)?;
    CholeskyFactor::factorize(&sym, q, policy)
}

impl CholeskyFactor {
    pub fn factorize(sym: &Arc<Symbolic>, q: &SparseSymmetric, policy: &JitterPolicy) -> Result<Self> {
        if !sym.matches(q) {
            return Err(LgmError::InvalidInput("matrix pattern does not match the symbolic analysis".into()));
        }
        let max_diag = q.max_diag().max(f64::MIN_POSITIVE);
        let mut jitter = 0.0;
        let mut last_err;
        let mut attempt = 0;
        loop {
            match numeric(sym, q.values(), jitter, policy.pivot_tol) {
                Ok(l_values) => {
                    let log_det = 2.0
                        * (0..sym.n).map(|k| l_values[sym.l_col_ptr[k]].ln()).sum::<f64>();
                    return Ok(Self { symbolic: Arc::clone(sym), l_values, log_det, jitter });
                }
                Err(e) => last_err = e,
            }
            if attempt >= policy.max_attempts {
                break;
            }
            jitter = if attempt == 0 {
                policy.initial_relative * max_diag
            } else {
                jitter * policy.growth
            };
            attempt += 1;
        }
        Err(LgmError::Factorization { jitter, reason: last_err.to_string() })
    }

    /// Refactorizes a matrix with the same pattern, reusing the symbolic analysis.
    pub fn refactor(&self, q: &SparseSymmetric, policy: &JitterPolicy) -> Result<Self> {
        Self::factorize(&self.symbolic, q, policy)
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    pub fn symbolic(&self) -> &Arc<Symbolic> {
        &self.symbolic
    }

    /// Log-determinant of the factored (possibly jittered) matrix.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Diagonal jitter that was needed; zero for a clean factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if rhs.len() != n {
            return Err(LgmError::DimensionMismatch { context: "cholesky solve", expected: n, found: rhs.len() });
        }
        let perm = &self.symbolic.perm;
        let mut y: Vec<f64> = perm.iter().map(|&o| rhs[o]).collect();
        self.forward(&mut y);
        self.backward(&mut y);
        let mut x = vec![0.0; n];
        for (k, &o) in perm.iter().enumerate() {
            x[o] = y[k];
        }
        Ok(x)
    }

    /// Solves `L y = b` in permuted coordinates.
    fn forward(&self, b: &mut [f64]) {
        let s = &self.symbolic;
        for j in 0..s.n {
            let p0 = s.l_col_ptr[j];
            let v = b[j] / self.l_values[p0];
            b[j] = v;
            for p in p0 + 1..s.l_col_ptr[j + 1] {
                b[s.l_row_idx[p]] -= self.l_values[p] * v;
            }
        }
    }

    /// Solves `Lᵀ x = y` in permuted coordinates.
    fn backward(&self, y: &mut [f64]) {
        let s = &self.symbolic;
        for j in (0..s.n).rev() {
            let p0 = s.l_col_ptr[j];
            let mut v = y[j];
            for p in p0 + 1..s.l_col_ptr[j + 1] {
                v -= self.l_values[p] * y[s.l_row_idx[p]];
            }
            y[j] = v / self.l_values[p0];
        }
    }

    /// Draws `mean + L⁻ᵀ z` (mapped back through the permutation), `z` standard normal.
    pub fn sample(&self, mean: &[f64], seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(mean, &mut rng)
    }

    pub fn sample_with<R: rand::Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let n = self.dim();
        if mean.len() != n {
            return Err(LgmError::DimensionMismatch { context: "gmrf sample", expected: n, found: mean.len() });
        }
        let mut z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        self.backward(&mut z);
        let mut x = mean.to_vec();
        for (k, &o) in self.symbolic.perm.iter().enumerate() {
            x[o] += z[k];
        }
        Ok(x)
    }

    /// `diag(Q⁻¹)` by selected inversion on the fill pattern, with a dense fallback
    /// for small matrices if the recursion produces non-finite values.
    pub fn marginal_variances(&self) -> Vec<f64> {
        let sigma = self.selected_inverse();
        let s = &self.symbolic;
        let mut var = vec![0.0; s.n];
        for (k, &o) in s.perm.iter().enumerate() {
            var[o] = sigma[s.l_col_ptr[k]];
        }
        if var.iter().all(|v| v.is_finite() && *v > 0.0) || s.n > 5000 {
            var
        } else {
            self.marginal_variances_dense()
        }
    }

    /// `diag(Q⁻¹)` through a dense inverse of the factor.
    pub fn marginal_variances_dense(&self) -> Vec<f64> {
        let n = self.dim();
        let l = self.l_dense();
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("factor has a positive diagonal");
        let mut var = vec![0.0; n];
        for (k, &o) in self.symbolic.perm.iter().enumerate() {
            // (L Lᵀ)⁻¹ = L⁻ᵀ L⁻¹ ; diagonal k = Σ_i (L⁻¹)_{ik}²
            var[o] = linv.column(k).norm_squared();
        }
        var
    }

    /// Entries of `(P Q Pᵀ)⁻¹` on the pattern of L (Takahashi recursions).
    fn selected_inverse(&self) -> Vec<f64> {
        let s = &self.symbolic;
        let n = s.n;
        let lp = &s.l_col_ptr;
        let li = &s.l_row_idx;
        let lx = &self.l_values;
        let mut sig = vec![0.0; lx.len()];
        let mut pos = vec![usize::MAX; n];
        let mut acc: Vec<f64> = Vec::new();
        let mut lval: Vec<f64> = Vec::new();
        for j in (0..n).rev() {
            let p0 = lp[j];
            let p1 = lp[j + 1];
            let ljj = lx[p0];
            let m = p1 - p0 - 1;
            acc.clear();
            acc.resize(m, 0.0);
            lval.clear();
            for (t, p) in (p0 + 1..p1).enumerate() {
                pos[li[p]] = t;
                lval.push(lx[p]);
            }
            for t in 0..m {
                let i = li[p0 + 1 + t];
                let lij = lval[t];
                let ci0 = lp[i];
                acc[t] += lij * sig[ci0];
                for q in ci0 + 1..lp[i + 1] {
                    let r = li[q];
                    let u = pos[r];
                    if u != usize::MAX {
                        let sri = sig[q];
                        acc[t] += lval[u] * sri;
                        acc[u] += lij * sri;
                    }
                }
            }
            let mut diag_acc = 0.0;
            for t in 0..m {
                let v = -acc[t] / ljj;
                sig[p0 + 1 + t] = v;
                diag_acc += lval[t] * v;
            }
            sig[p0] = 1.0 / (ljj * ljj) - diag_acc / ljj;
            for p in p0 + 1..p1 {
                pos[li[p]] = usize::MAX;
            }
        }
        sig
    }

    /// Dense lower factor in permuted coordinates.
    pub fn l_dense(&self) -> DMatrix<f64> {
        let s = &self.symbolic;
        let mut l = DMatrix::zeros(s.n, s.n);
        for j in 0..s.n {
            for p in s.l_col_ptr[j]..s.l_col_ptr[j + 1] {
                l[(s.l_row_idx[p], j)] = self.l_values[p];
            }
        }
        l
    }

    /// Dense `P L Lᵀ Pᵀ` in the original ordering.
    pub fn reconstruct_dense(&self) -> DMatrix<f64> {
        let l = self.l_dense();
        let c = &l * l.transpose();
        let n = self.dim();
        let perm = &self.symbolic.perm;
        let mut out = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                out[(perm[a], perm[b])] = c[(a, b)];
            }
        }
        out
    }
}

fn numeric(sym: &Symbolic, values: &[f64], jitter: f64, pivot_tol: f64) -> Result<Vec<f64>> {
    let n = sym.n;
    let mut lx = vec![0.0; sym.l_row_idx.len()];
    let mut next: Vec<usize> = sym.l_col_ptr[..n].to_vec();
    let mut x = vec![0.0; n];
    for k in 0..n {
        let mut akk = 0.0;
        for p in sym.up_col_ptr[k]..sym.up_col_ptr[k + 1] {
            let r = sym.up_row_idx[p];
            let v = values[sym.up_src[p]];
            if r == k {
                akk += v;
            } else {
                x[r] += v;
            }
        }
        akk += jitter;
        let mut d = akk;
        for &i in &sym.reach[sym.reach_ptr[k]..sym.reach_ptr[k + 1]] {
            let p0 = sym.l_col_ptr[i];
            let lki = x[i] / lx[p0];
            x[i] = 0.0;
            for p in p0 + 1..next[i] {
                x[sym.l_row_idx[p]] -= lx[p] * lki;
            }
            d -= lki * lki;
            lx[next[i]] = lki;
            next[i] += 1;
        }
        if !(d > pivot_tol * akk.abs()) || !d.is_finite() {
            return Err(LgmError::NotPositiveDefinite { index: sym.perm[k], pivot: d });
        }
        lx[next[k]] = d.sqrt();
        next[k] += 1;
    }
    Ok(lx)
}

/// Ordering `perm[new] = old`. Very dense nodes are moved to the end.
fn compute_ordering(q: &SparseSymmetric, kind: OrderingKind) -> Vec<usize> {
    let n = q.dim();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (r, c, _) in q.iter() {
        if r != c {
            adj[r].push(c);
            adj[c].push(r);
        }
    }
    let deg: Vec<usize> = adj.iter().map(Vec::len).collect();
    let dense_threshold = ((10.0 * (n as f64).sqrt()) as usize).max(16);
    let dense: Vec<bool> = deg.iter().map(|&d| d > dense_threshold).collect();
    let mut dense_nodes: Vec<usize> = (0..n).filter(|&i| dense[i]).collect();
    dense_nodes.sort_by_key(|&i| (deg[i], i));

    let natural: Vec<usize> = (0..n).filter(|&i| !dense[i]).chain(dense_nodes.iter().copied()).collect();
    if kind == OrderingKind::Natural {
        return natural;
    }
    let mut rcm = reverse_cuthill_mckee(&adj, &deg, &dense);
    rcm.extend(dense_nodes.iter().copied());
    if kind == OrderingKind::ReverseCuthillMcKee {
        return rcm;
    }
    if envelope(q, &rcm) < envelope(q, &natural) {
        rcm
    } else {
        natural
    }
}

fn envelope(q: &SparseSymmetric, perm: &[usize]) -> usize {
    let n = q.dim();
    let mut inv = vec![0usize; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let mut first: Vec<usize> = (0..n).collect();
    for (r, c, _) in q.iter() {
        let (a, b) = (inv[r], inv[c]);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        first[hi] = first[hi].min(lo);
    }
    first.iter().enumerate().map(|(i, &f)| i - f).sum()
}

fn reverse_cuthill_mckee(adj: &[Vec<usize>], deg: &[usize], skip: &[bool]) -> Vec<usize> {
    let n = adj.len();
    let mut visited = skip.to_vec();
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).filter(|&i| !skip[i]).collect();
    by_degree.sort_by_key(|&i| (deg[i], i));
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(adj, deg, skip, seed);
        let mut queue = VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nb: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            nb.sort_by_key(|&u| (deg[u], u));
            nb.dedup();
            for u in nb {
                if !visited[u] {
                    visited[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(adj: &[Vec<usize>], deg: &[usize], skip: &[bool], start: usize) -> usize {
    let mut root = start;
    let mut ecc = 0;
    for _ in 0..8 {
        let levels = bfs_levels(adj, skip, root);
        let depth = levels.len() - 1;
        let last = &levels[depth];
        let cand = *last.iter().min_by_key(|&&u| (deg[u], u)).unwrap();
        if depth <= ecc && root != start {
            break;
        }
        if depth > ecc {
            ecc = depth;
            root = cand;
        } else {
            break;
        }
    }
    root
}

fn bfs_levels(adj: &[Vec<usize>], skip: &[bool], root: usize) -> Vec<Vec<usize>> {
    let mut seen = skip.to_vec();
    seen[root] = true;
    let mut levels = vec![vec![root]];
    loop {
        let mut next = Vec::new();
        for &v in levels.last().unwrap() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    next.push(u);
                }
            }
        }
        if next.is_empty() {
            return levels;
        }
        levels.push(next);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::builders::{build_ar1_precision, build_rw1_precision};

    fn random_spd(n: usize, seed: u64) -> SparseSymmetric {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        let mut rowsum = vec![0.0; n];
        for c in 0..n {
            for r in c + 1..n {
                if rng.random::<f64>() < 0.15 {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    t.push((r, c, v));
                    rowsum[r] += v.abs();
                    rowsum[c] += v.abs();
                }
            }
        }
        for i in 0..n {
            t.push((i, i, rowsum[i] + 0.5 + rng.random::<f64>()));
        }
        SparseSymmetric::from_lower_triplets(n, t).unwrap()
    }

    #[test]
    fn diagonal_log_det() {
        let f = cholesky(&SparseSymmetric::diagonal(&[4.0, 9.0]), &JitterPolicy::default()).unwrap();
        assert!((f.log_det() - 36f64.ln()).abs() < 1e-14);
        assert_eq!(f.jitter(), 0.0);
    }

    #[test]
    fn solve_diagonal() {
        let f = cholesky(&SparseSymmetric::diagonal(&[2.0, 4.0]), &JitterPolicy::default()).unwrap();
        let x = f.solve(&[2.0, 4.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
        assert!(f.solve(&[1.0]).is_err());
    }

    #[test]
    fn rw1_needs_jitter() {
        let q = build_rw1_precision(3, 1.0).unwrap();
        assert!(cholesky(&q, &JitterPolicy::none()).is_err());
        let f = cholesky(&q, &JitterPolicy::default()).unwrap();
        assert!(f.jitter() > 0.0);
    }

    #[test]
    fn reconstruction_and_variances_on_random_spd() {
        for seed in 0..6 {
            let q = random_spd(40 + 10 * seed as usize, seed);
            let f = cholesky(&q, &JitterPolicy::none()).unwrap();
            let dense = q.to_dense();
            let rel = (f.reconstruct_dense() - &dense).norm() / dense.norm();
            assert!(rel < 1e-12, "reconstruction error {rel}");
            let inv = dense.clone().try_inverse().unwrap();
            let v = f.marginal_variances();
            for i in 0..q.dim() {
                assert!((v[i] - inv[(i, i)]).abs() < 1e-10 * inv[(i, i)].abs().max(1.0));
            }
            let vd = f.marginal_variances_dense();
            for i in 0..q.dim() {
                assert!((vd[i] - inv[(i, i)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dense_node_is_ordered_last() {
        let n = 200;
        let mut t: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 300.0)).collect();
        for i in 1..n {
            t.push((i, 0, 1.0));
        }
        for i in 2..n {
            t.push((i, i - 1, -0.5));
        }
        let q = SparseSymmetric::from_lower_triplets(n, t).unwrap();
        let sym = Symbolic::analyze(&q, OrderingKind::Auto).unwrap();
        assert_eq!(*sym.perm().last().unwrap(), 0);
        assert!(sym.factor_nnz() < 3 * n);
    }

    #[test]
    fn cache_reuses_symbolic() {
        let cache = SymbolicCache::new(OrderingKind::Auto);
        let a = build_ar1_precision(20, 0.3, 1.0).unwrap();
        let b = build_ar1_precision(20, 0.7, 2.0).unwrap();
        let sa = cache.get(&a).unwrap();
        let sb = cache.get(&b).unwrap();
        assert!(Arc::ptr_eq(&sa, &sb));
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn cache_evicts_least_recently_used() {
        let cache = SymbolicCache::with_capacity(OrderingKind::Auto, 2);
        let q = |n| build_ar1_precision(n, 0.3, 1.0).unwrap();
        let first = cache.get(&q(5)).unwrap();
        cache.get(&q(6)).unwrap();
        assert!(Arc::ptr_eq(&first, &cache.get(&q(5)).unwrap()));
        cache.get(&q(7)).unwrap();
        assert_eq!(cache.len(), 2);
        // 6 was evicted, 5 survived its refresh
        assert!(Arc::ptr_eq(&first, &cache.get(&q(5)).unwrap()));
        assert_eq!(Arc::strong_count(&first), 2);
    }

    #[test]
    fn sampling_is_deterministic() {
        let q = build_ar1_precision(10, 0.5, 1.0).unwrap();
        let f = cholesky(&q, &JitterPolicy::default()).unwrap();
        let m = vec![0.0; 10];
        assert_eq!(f.sample(&m, 7).unwrap(), f.sample(&m, 7).unwrap());
        assert_ne!(f.sample(&m, 7).unwrap(), f.sample(&m, 8).unwrap());
    }
}
