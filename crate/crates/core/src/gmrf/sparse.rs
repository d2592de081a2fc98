//! Compressed sparse storage for symmetric precisions and general row maps.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LgmError, Result};

/// Symmetric matrix stored as its lower triangle in compressed-column form.
///
/// Row indices within each column are strictly increasing, so the diagonal
/// (when present) is the first entry of its column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSymmetric {
    dim: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Accumulates lower-triangle contributions; duplicate coordinates are summed.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    dim: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: Vec::new() }
    }

    pub fn with_capacity(dim: usize, cap: usize) -> Self {
        Self { dim, entries: Vec::with_capacity(cap) }
    }

    /// Adds `v` at the unordered position `{i, j}` of the symmetric matrix.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        if i >= j {
            self.entries.push((i, j, v));
        } else {
            self.entries.push((j, i, v));
        }
    }

    /// Adds every stored entry of `m`, shifted by `offset` along the diagonal.
    pub fn add_block(&mut self, offset: usize, m: &SparseSymmetric) {
        for (r, c, v) in m.iter() {
            self.entries.push((r + offset, c + offset, v));
        }
    }

    pub fn build(self) -> Result<SparseSymmetric> {
        SparseSymmetric::from_lower_triplets(self.dim, self.entries)
    }
}

impl SparseSymmetric {
    /// Builds from lower-triangle triplets `(row, col, value)` with `row >= col`.
    /// Duplicates are summed; explicit zeros are kept so patterns stay stable.
    pub fn from_lower_triplets(
        dim: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        if dim == 0 {
            return invalid("sparse matrix dimension must be at least 1");
        }
        let mut t: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(r, c, v) in &t {
            if r >= dim || c >= dim {
                return invalid(format!("entry ({r},{c}) outside a {dim}x{dim} matrix"));
            }
            if r < c {
                return invalid(format!("entry ({r},{c}) is above the diagonal"));
            }
            if !v.is_finite() {
                return Err(LgmError::NonFinite("sparse matrix entry"));
            }
        }
        t.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut col_ptr = vec![0usize; dim + 1];
        let mut row_idx = Vec::with_capacity(t.len());
        let mut values = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for c in 0..dim {
            col_ptr[c + 1] += col_ptr[c];
        }
        Ok(Self { dim, col_ptr, row_idx, values })
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let dim = d.len();
        Self {
            dim,
            col_ptr: (0..=dim).collect(),
            row_idx: (0..dim).collect(),
            values: d.to_vec(),
        }
    }

    /// Lower triangle of a dense symmetric matrix (entries with |v| <= `drop_tol` are skipped,
    /// except on the diagonal).
    pub fn from_dense(m: &DMatrix<f64>, drop_tol: f64) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return invalid("dense matrix must be square");
        }
        let n = m.nrows();
        let mut t = Vec::new();
        for c in 0..n {
            for r in c..n {
                let v = m[(r, c)];
                if r == c || v.abs() > drop_tol {
                    t.push((r, c, v));
                }
            }
        }
        Self::from_lower_triplets(n, t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Iterates stored lower-triangle entries as `(row, col, value)`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim).flat_map(move |c| {
            (self.col_ptr[c]..self.col_ptr[c + 1]).map(move |p| (self.row_idx[p], c, self.values[p]))
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let rows = &self.row_idx[self.col_ptr[c]..self.col_ptr[c + 1]];
        match rows.binary_search(&r) {
            Ok(k) => self.values[self.col_ptr[c] + k],
            Err(_) => 0.0,
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|c| self.get(c, c)).collect()
    }

    pub fn max_diag(&self) -> f64 {
        self.diag().into_iter().fold(0.0_f64, |a, b| a.max(b.abs()))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (r, c, v) in self.iter() {
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
        m
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "matvec dimension");
        let mut y = vec![0.0; self.dim];
        for c in 0..self.dim {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                let v = self.values[p];
                y[r] += v * x[c];
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
        y
    }

    /// `xᵀ M x`
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for c in 0..self.dim {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                let v = self.values[p];
                if r == c {
                    s += v * x[r] * x[r];
                } else {
                    s += 2.0 * v * x[r] * x[c];
                }
            }
        }
        s
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Sum over the union of both patterns.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(LgmError::DimensionMismatch {
                context: "sparse add",
                expected: self.dim,
                found: other.dim,
            });
        }
        Self::from_lower_triplets(self.dim, self.iter().chain(other.iter()))
    }

    pub fn same_pattern(&self, other: &Self) -> bool {
        self.dim == other.dim && self.col_ptr == other.col_ptr && self.row_idx == other.row_idx
    }

    pub fn pattern_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.dim.hash(&mut h);
        self.col_ptr.hash(&mut h);
        self.row_idx.hash(&mut h);
        h.finish()
    }

    /// Symmetric permutation: entry `(i, j)` of the result is entry `(perm[i], perm[j])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.dim {
            return Err(LgmError::DimensionMismatch {
                context: "permutation",
                expected: self.dim,
                found: perm.len(),
            });
        }
        let mut inv = vec![usize::MAX; self.dim];
        for (new, &old) in perm.iter().enumerate() {
            if old >= self.dim || inv[old] != usize::MAX {
                return invalid("permutation is not a bijection");
            }
            inv[old] = new;
        }
        Self::from_lower_triplets(
            self.dim,
            self.iter().map(|(r, c, v)| {
                let (a, b) = (inv[r], inv[c]);
                if a >= b {
                    (a, b, v)
                } else {
                    (b, a, v)
                }
            }),
        )
    }

    /// Principal submatrix on `indices` (in the given order).
    pub fn submatrix(&self, indices: &[usize]) -> Result<Self> {
        let mut pos = vec![usize::MAX; self.dim];
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.dim {
                return invalid("submatrix index out of range");
            }
            pos[i] = k;
        }
        let t = self.iter().filter_map(|(r, c, v)| {
            let (a, b) = (pos[r], pos[c]);
            if a == usize::MAX || b == usize::MAX {
                None
            } else if a >= b {
                Some((a, b, v))
            } else {
                Some((b, a, v))
            }
        });
        Self::from_lower_triplets(indices.len(), t)
    }

    /// Relative Frobenius distance `‖A − B‖ / ‖B‖` over the full symmetric matrices.
    pub fn rel_frobenius_diff(&self, reference: &Self) -> f64 {
        let a = self.to_dense();
        let b = reference.to_dense();
        (&a - &b).norm() / b.norm().max(f64::MIN_POSITIVE)
    }

    /// True if every stored row index is at or below the diagonal and
    /// row indices are strictly increasing within each column.
    pub fn check_invariants(&self) -> bool {
        if self.col_ptr.len() != self.dim + 1 || self.col_ptr[self.dim] != self.values.len() {
            return false;
        }
        (0..self.dim).all(|c| {
            let rows = &self.row_idx[self.col_ptr[c]..self.col_ptr[c + 1]];
            rows.iter().all(|&r| r >= c && r < self.dim) && rows.windows(2).all(|w| w[0] < w[1])
        })
    }
}

/// General sparse matrix in compressed-row form (design matrices, aggregation maps).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseRows {
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    /// Builds from per-row `(col, value)` lists; duplicate columns within a row are summed.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut last = usize::MAX;
            for (c, v) in row {
                if c >= ncols {
                    return invalid(format!("column {c} outside a map with {ncols} columns"));
                }
                if !v.is_finite() {
                    return Err(LgmError::NonFinite("sparse row entry"));
                }
                if c == last {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                    last = c;
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self { ncols, row_ptr, col_idx, values })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn empty(ncols: usize) -> Self {
        Self { ncols, row_ptr: vec![0], col_idx: vec![], values: vec![] }
    }

    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |p| (self.col_idx[p], self.values[p]))
    }

    pub fn row_cols(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn row_values(&self, i: usize) -> &[f64] {
        &self.values[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row_values(i).iter().sum()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols, "sparse row map dimension");
        (0..self.nrows()).map(|i| self.row(i).map(|(c, v)| v * x[c]).sum()).collect()
    }

    /// `Mᵀ y`
    pub fn tr_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.nrows(), "sparse row map dimension");
        let mut out = vec![0.0; self.ncols];
        for (i, &yi) in y.iter().enumerate() {
            for (c, v) in self.row(i) {
                out[c] += v * yi;
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for &i in rows {
            col_idx.extend_from_slice(self.row_cols(i));
            values.extend_from_slice(self.row_values(i));
            row_ptr.push(col_idx.len());
        }
        Self { ncols: self.ncols, row_ptr, col_idx, values }
    }

    /// Shifts column indices by `offset` inside a wider map of `ncols` columns.
    pub fn embed(&self, offset: usize, ncols: usize) -> Result<Self> {
        if offset + self.ncols > ncols {
            return invalid("embedded map does not fit in the target width");
        }
        let mut out = self.clone();
        out.ncols = ncols;
        out.col_idx.iter_mut().for_each(|c| *c += offset);
        Ok(out)
    }

    /// Matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &SparseRows) -> Result<Self> {
        if self.ncols != rhs.nrows() {
            return Err(LgmError::DimensionMismatch {
                context: "sparse matmul",
                expected: self.ncols,
                found: rhs.nrows(),
            });
        }
        let rows = (0..self.nrows())
            .map(|i| {
                let mut acc: Vec<(usize, f64)> = Vec::new();
                for (k, a) in self.row(i) {
                    acc.extend(rhs.row(k).map(|(c, b)| (c, a * b)));
                }
                acc
            })
            .collect();
        Self::from_rows(rhs.ncols, rows)
    }

    /// Entrywise sum of two maps with equal shape.
    pub fn add(&self, other: &SparseRows) -> Result<Self> {
        if self.ncols != other.ncols || self.nrows() != other.nrows() {
            return invalid("sparse row maps of different shape");
        }
        let rows = (0..self.nrows())
            .map(|i| self.row(i).chain(other.row(i)).collect())
            .collect();
        Self::from_rows(self.ncols, rows)
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn vstack(&self, other: &SparseRows) -> Result<Self> {
        if self.ncols != other.ncols {
            return invalid("cannot stack maps with different widths");
        }
        let mut out = self.clone();
        let base = out.col_idx.len();
        out.col_idx.extend_from_slice(&other.col_idx);
        out.values.extend_from_slice(&other.values);
        out.row_ptr.extend(other.row_ptr[1..].iter().map(|p| p + base));
        Ok(out)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for i in 0..self.nrows() {
            for (c, v) in self.row(i) {
                m[(i, c)] += v;
            }
        }
        m
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows()).flat_map(move |i| self.row(i).map(move |(c, v)| (i, c, v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed_and_sorted() {
        let m = SparseSymmetric::from_lower_triplets(3, vec![(2, 0, 1.0), (1, 0, 2.0), (2, 0, 0.5), (0, 0, 4.0)])
            .unwrap();
        assert!(m.check_invariants());
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 2), 1.5);
        assert_eq!(m.get(2, 0), 1.5);
    }

    #[test]
    fn upper_entries_rejected() {
        assert!(SparseSymmetric::from_lower_triplets(2, vec![(0, 1, 1.0)]).is_err());
        assert!(SparseSymmetric::from_lower_triplets(0, vec![]).is_err());
    }

    #[test]
    fn matvec_matches_dense() {
        let m = SparseSymmetric::from_lower_triplets(3, vec![(0, 0, 2.0), (1, 0, -1.0), (1, 1, 3.0), (2, 1, 0.5), (2, 2, 1.0)])
            .unwrap();
        let x = [1.0, -2.0, 0.5];
        let y = m.matvec(&x);
        let d = m.to_dense() * nalgebra::DVector::from_row_slice(&x);
        for i in 0..3 {
            assert!((y[i] - d[i]).abs() < 1e-14);
        }
        let q = m.quad_form(&x);
        assert!((q - x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>()).abs() < 1e-13);
    }

    #[test]
    fn permutation_round_trip() {
        let m = SparseSymmetric::from_lower_triplets(3, vec![(0, 0, 2.0), (2, 0, -1.0), (1, 1, 3.0), (2, 2, 5.0)]).unwrap();
        let p = m.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.get(0, 0), 5.0);
        assert_eq!(p.get(1, 0), -1.0);
        let back = p.permuted(&[1, 2, 0]).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn row_map_products() {
        let a = SparseRows::from_rows(3, vec![vec![(0, 1.0), (2, 2.0)], vec![(1, 1.0)]]).unwrap();
        let b = SparseRows::from_rows(2, vec![vec![(0, 1.0)], vec![(1, 3.0)], vec![(0, 1.0), (1, 1.0)]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.to_dense(), a.to_dense() * b.to_dense());
        assert_eq!(a.tr_mul_vec(&[1.0, 2.0]), vec![1.0, 2.0, 2.0]);
    }
}
