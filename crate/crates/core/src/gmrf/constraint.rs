//! Hard linear constraints `A x = e` imposed by conditioning a Gaussian.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cholesky::CholeskyFactor;
use super::sparse::SparseSymmetric;
use crate::error::{invalid, LgmError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A set of `k` constraints on an `n`-vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraints {
    n: usize,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
}

impl LinearConstraints {
    pub fn none(n: usize) -> Self {
        Self { n, rows: Vec::new(), rhs: Vec::new() }
    }

    pub fn new(n: usize, rows: Vec<Vec<f64>>, rhs: Vec<f64>) -> Result<Self> {
        if rows.len() != rhs.len() {
            return Err(LgmError::DimensionMismatch { context: "constraint rhs", expected: rows.len(), found: rhs.len() });
        }
        for r in &rows {
            if r.len() != n {
                return Err(LgmError::DimensionMismatch { context: "constraint vector", expected: n, found: r.len() });
            }
            if r.iter().all(|v| *v == 0.0) {
                return invalid("constraint vector is identically zero");
            }
        }
        Ok(Self { n, rows, rhs })
    }

    pub fn sum_to_zero(n: usize) -> Self {
        Self { n, rows: vec![vec![1.0; n]], rhs: vec![0.0] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// Places these constraints at `offset` inside a vector of length `total`.
    pub fn embedded(&self, offset: usize, total: usize) -> Result<Self> {
        if offset + self.n > total {
            return invalid("embedded constraints exceed the target dimension");
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut v = vec![0.0; total];
                v[offset..offset + self.n].copy_from_slice(r);
                v
            })
            .collect();
        Ok(Self { n: total, rows, rhs: self.rhs.clone() })
    }

    /// Concatenates constraint sets on the same vector.
    pub fn stacked(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(LgmError::DimensionMismatch { context: "constraint stacking", expected: self.n, found: other.n });
        }
        let mut out = self.clone();
        out.rows.extend(other.rows.iter().cloned());
        out.rhs.extend_from_slice(&other.rhs);
        Ok(out)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.apply(x).iter().zip(&self.rhs).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max)
    }
}

/// Conditioning terms for a Gaussian with precision `Q` under constraints `A x = e`:
/// `W = Q⁻¹ Aᵀ` and `S = A Q⁻¹ Aᵀ`.
#[derive(Debug, Clone)]
pub struct ConstraintCorrection {
    w: DMatrix<f64>,
    s_inv: DMatrix<f64>,
    log_det_s: f64,
    rhs: DVector<f64>,
    a: DMatrix<f64>,
}

impl ConstraintCorrection {
    pub fn new(factor: &CholeskyFactor, c: &LinearConstraints) -> Result<Option<Self>> {
        if c.is_empty() {
            return Ok(None);
        }
        let n = factor.dim();
        if c.dim() != n {
            return Err(LgmError::DimensionMismatch { context: "constraint correction", expected: n, found: c.dim() });
        }
        let k = c.len();
        let mut w = DMatrix::zeros(n, k);
        for (j, row) in c.rows().iter().enumerate() {
            let col = factor.solve(row)?;
            w.set_column(j, &DVector::from_vec(col));
        }
        let a = DMatrix::from_fn(k, n, |i, j| c.rows()[i][j]);
        let s = &a * &w;
        let s = (&s + s.transpose()) * 0.5;
        let chol = s
            .clone()
            .cholesky()
            .ok_or(LgmError::NotPositiveDefinite { index: 0, pivot: f64::NAN })?;
        let log_det_s = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let s_inv = chol.inverse();
        Ok(Some(Self { w, s_inv, log_det_s, rhs: DVector::from_column_slice(c.rhs()), a }))
    }

    pub fn k(&self) -> usize {
        self.s_inv.nrows()
    }

    /// `log |A Q⁻¹ Aᵀ|`
    pub fn log_det_s(&self) -> f64 {
        self.log_det_s
    }

    /// Projects `x` onto the constraint set along `Q⁻¹`: `x − W S⁻¹ (A x − e)`.
    pub fn correct(&self, x: &[f64]) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        let r = &self.a * &xv - &self.rhs;
        let shift = &self.w * (&self.s_inv * r);
        (xv - shift).iter().copied().collect()
    }

    /// Diagonal of `W S⁻¹ Wᵀ`, the variance removed by conditioning.
    pub fn variance_reduction(&self) -> Vec<f64> {
        let ws = &self.w * &self.s_inv;
        (0..self.w.nrows()).map(|i| ws.row(i).dot(&self.w.row(i))).collect()
    }

    /// Log-density of `A x` at `e` when `x ~ N(mean, Q⁻¹)`.
    pub fn log_density_of_constraint(&self, mean: &[f64]) -> f64 {
        let r = &self.rhs - &self.a * DVector::from_column_slice(mean);
        let k = self.k() as f64;
        -0.5 * k * LN_2PI - 0.5 * self.log_det_s - 0.5 * (r.transpose() * &self.s_inv * &r)[(0, 0)]
    }
}

/// Log-density of `N(mean, Q⁻¹)` at `x`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], q: &SparseSymmetric, log_det_q: f64) -> f64 {
    let d: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    -0.5 * x.len() as f64 * LN_2PI + 0.5 * log_det_q - 0.5 * q.quad_form(&d)
}

/// Log-density at `x` (with `A x = e`) of `N(mean, Q⁻¹)` conditioned on the constraints.
pub fn constrained_log_density(
    x: &[f64],
    mean: &[f64],
    q: &SparseSymmetric,
    factor: &CholeskyFactor,
    correction: Option<&ConstraintCorrection>,
) -> f64 {
    let base = gaussian_log_density(x, mean, q, factor.log_det());
    match correction {
        Some(c) => base - c.log_density_of_constraint(mean),
        None => base,
    }
}

/// Log-density of a constrained Gaussian at its own (constrained) mean.
pub fn log_density_at_mode(n: usize, log_det_q: f64, correction: Option<&ConstraintCorrection>) -> f64 {
    let k = correction.map_or(0, ConstraintCorrection::k);
    let extra = correction.map_or(0.0, ConstraintCorrection::log_det_s);
    -0.5 * (n - k) as f64 * LN_2PI + 0.5 * log_det_q + 0.5 * extra
}
