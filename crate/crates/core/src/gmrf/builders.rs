//! Precision constructors for the latent block types.

use super::cholesky::{cholesky, JitterPolicy};
use super::sparse::{SparseSymmetric, TripletBuilder};
use crate::error::{invalid, LgmError, Result};

/// Largest dimension [`kronecker`] will build without an explicit limit.
pub const DEFAULT_MAX_KRONECKER_DIM: usize = 1 << 22;

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return invalid(format!("precision must be positive and finite, got {tau}"));
    }
    Ok(())
}

pub fn build_iid_precision(n: usize, tau: f64) -> Result<SparseSymmetric> {
    check_tau(tau)?;
    if n == 0 {
        return invalid("iid block needs at least one node");
    }
    Ok(SparseSymmetric::diagonal(&vec![tau; n]))
}

/// Stationary AR1 precision with lag-one correlation `rho` and marginal precision `tau`.
pub fn build_ar1_precision(n: usize, rho: f64, tau: f64) -> Result<SparseSymmetric> {
    check_tau(tau)?;
    if n == 0 {
        return invalid("AR1 block needs at least one node");
    }
    if !(rho.abs() < 1.0) {
        return invalid(format!("AR1 correlation must lie in (-1, 1), got {rho}"));
    }
    if n == 1 {
        return Ok(SparseSymmetric::diagonal(&[tau]));
    }
    let s = tau / (1.0 - rho * rho);
    let mut t = TripletBuilder::with_capacity(n, 2 * n);
    for i in 0..n {
        let d = if i == 0 || i == n - 1 { 1.0 } else { 1.0 + rho * rho };
        t.add(i, i, s * d);
        if i + 1 < n {
            t.add(i + 1, i, -s * rho);
        }
    }
    t.build()
}

/// Log-determinant of [`build_ar1_precision`], in closed form.
pub fn ar1_log_det(n: usize, rho: f64, tau: f64) -> f64 {
    n as f64 * tau.ln() - (n.saturating_sub(1)) as f64 * (1.0 - rho * rho).ln()
}

/// First-order random walk precision `tau * DᵀD` (rank `n - 1`).
pub fn build_rw1_precision(n: usize, tau: f64) -> Result<SparseSymmetric> {
    check_tau(tau)?;
    if n < 2 {
        return invalid("RW1 block needs at least two nodes");
    }
    let mut t = TripletBuilder::with_capacity(n, 2 * n);
    for i in 0..n {
        let d = if i == 0 || i == n - 1 { 1.0 } else { 2.0 };
        t.add(i, i, tau * d);
        if i + 1 < n {
            t.add(i + 1, i, -tau);
        }
    }
    t.build()
}

/// Unscaled lattice operator `(κ² I + G)²` with `G` the 4-neighbour graph Laplacian, κ = √8 / range.
pub fn lattice_matern_structure(nrow: usize, ncol: usize, range: f64) -> Result<SparseSymmetric> {
    if nrow < 2 || ncol < 2 {
        return invalid("lattice needs at least 2 rows and 2 columns");
    }
    if !(range > 0.0 && range.is_finite()) {
        return invalid(format!("range must be positive and finite, got {range}"));
    }
    let n = nrow * ncol;
    let kappa2 = 8.0 / (range * range);
    // K = κ² I + G as adjacency lists with weights (full symmetric rows).
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(5); n];
    for r in 0..nrow {
        for c in 0..ncol {
            let i = r * ncol + c;
            let mut deg = 0.0;
            let mut push = |j: usize, rows: &mut Vec<Vec<(usize, f64)>>| {
                rows[i].push((j, -1.0));
                deg += 1.0;
            };
            if r > 0 {
                push(i - ncol, &mut rows);
            }
            if r + 1 < nrow {
                push(i + ncol, &mut rows);
            }
            if c > 0 {
                push(i - 1, &mut rows);
            }
            if c + 1 < ncol {
                push(i + 1, &mut rows);
            }
            rows[i].push((i, kappa2 + deg));
        }
    }
    // K is symmetric, so (K K)_{ij} = Σ_k K_ik K_kj.
    let mut t = TripletBuilder::with_capacity(n, 13 * n);
    for k in 0..n {
        for &(i, a) in &rows[k] {
            for &(j, b) in &rows[k] {
                if i >= j {
                    t.add(i, j, a * b);
                }
            }
        }
    }
    t.build()
}

/// Index of the node used to calibrate the lattice marginal variance.
pub fn lattice_center(nrow: usize, ncol: usize) -> usize {
    (nrow / 2) * ncol + ncol / 2
}

/// Variance of the centre node under [`lattice_matern_structure`].
pub fn lattice_matern_calibration(structure: &SparseSymmetric, nrow: usize, ncol: usize) -> Result<f64> {
    let f = cholesky(structure, &JitterPolicy::none())?;
    let center = lattice_center(nrow, ncol);
    let mut e = vec![0.0; structure.dim()];
    e[center] = 1.0;
    Ok(f.solve(&e)?[center])
}

/// Matérn-like lattice precision scaled so the centre node has marginal precision `tau`.
pub fn build_lattice_matern_precision(nrow: usize, ncol: usize, range: f64, tau: f64) -> Result<SparseSymmetric> {
    check_tau(tau)?;
    let q0 = lattice_matern_structure(nrow, ncol, range)?;
    let v = lattice_matern_calibration(&q0, nrow, ncol)?;
    Ok(q0.scaled(tau * v))
}

/// `a ⊗ b`, refusing results larger than [`DEFAULT_MAX_KRONECKER_DIM`].
pub fn kronecker(a: &SparseSymmetric, b: &SparseSymmetric) -> Result<SparseSymmetric> {
    kronecker_with_limit(a, b, DEFAULT_MAX_KRONECKER_DIM)
}

pub fn kronecker_with_limit(a: &SparseSymmetric, b: &SparseSymmetric, max_dim: usize) -> Result<SparseSymmetric> {
    let (na, nb) = (a.dim(), b.dim());
    let n = na
        .checked_mul(nb)
        .filter(|&n| n <= max_dim)
        .ok_or_else(|| LgmError::Overflow(format!("kronecker product of {na} and {nb} exceeds {max_dim}")))?;
    let b_full: Vec<(usize, usize, f64)> = b
        .iter()
        .flat_map(|(r, c, v)| {
            let mirror = if r != c { Some((c, r, v)) } else { None };
            std::iter::once((r, c, v)).chain(mirror)
        })
        .collect();
    let mut t = Vec::with_capacity(a.nnz() * b_full.len());
    for (i1, j1, va) in a.iter() {
        if i1 == j1 {
            for (i2, j2, vb) in b.iter() {
                t.push((i1 * nb + i2, j1 * nb + j2, va * vb));
            }
        } else {
            for &(i2, j2, vb) in &b_full {
                t.push((i1 * nb + i2, j1 * nb + j2, va * vb));
            }
        }
    }
    SparseSymmetric::from_lower_triplets(n, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn ar1_trivial_cases() {
        assert_eq!(build_ar1_precision(3, 0.0, 2.0).unwrap().to_dense(), DMatrix::from_diagonal_element(3, 3, 2.0));
        assert_eq!(build_ar1_precision(1, 0.9, 1.0).unwrap().to_dense()[(0, 0)], 1.0);
        assert!(build_ar1_precision(3, 1.0, 1.0).is_err());
        assert!(build_ar1_precision(3, 0.2, 0.0).is_err());
        assert!(build_ar1_precision(0, 0.2, 1.0).is_err());
    }

    #[test]
    fn ar1_inverse_is_stationary_covariance() {
        let cov = build_ar1_precision(4, 0.5, 1.0).unwrap().to_dense().try_inverse().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = 0.5f64.powi((i as i32 - j as i32).abs());
                assert!((cov[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rw1_examples() {
        let q = build_rw1_precision(2, 1.0).unwrap().to_dense();
        assert_eq!(q, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let q3 = build_rw1_precision(3, 3.0).unwrap().to_dense();
        let e = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]) * 3.0;
        assert_eq!(q3, e);
        let q5 = build_rw1_precision(5, 1.0).unwrap();
        assert!(q5.matvec(&[1.0; 5]).iter().all(|v| *v == 0.0));
        assert!(build_rw1_precision(1, 1.0).is_err());
    }

    #[test]
    fn lattice_center_variance_and_tau_scaling() {
        let q = build_lattice_matern_precision(5, 5, 2.0, 1.0).unwrap();
        let cov = q.to_dense().try_inverse().unwrap();
        let c = lattice_center(5, 5);
        assert!((cov[(c, c)] - 1.0).abs() < 0.2);
        let q1 = build_lattice_matern_precision(3, 3, 1.0, 1.0).unwrap();
        let q4 = build_lattice_matern_precision(3, 3, 1.0, 4.0).unwrap();
        assert!(q4.rel_frobenius_diff(&q1.scaled(4.0)) < 1e-14);
    }

    #[test]
    fn lattice_large_range_is_laplacian_dominated() {
        let q = lattice_matern_structure(2, 2, 1e4).unwrap().to_dense();
        // G² for the 4-cycle has zero row sums.
        for i in 0..4 {
            assert!(q.row(i).sum().abs() < 1e-6);
        }
    }

    #[test]
    fn kronecker_matches_dense() {
        let a = build_ar1_precision(2, 0.5, 1.0).unwrap();
        let b = build_ar1_precision(2, 0.3, 1.0).unwrap();
        let k = kronecker(&a, &b).unwrap().to_dense();
        assert!((k - a.to_dense().kronecker(&b.to_dense())).norm() < 1e-14);
        let i6 = kronecker(&SparseSymmetric::identity(2), &SparseSymmetric::identity(3)).unwrap();
        assert_eq!(i6, SparseSymmetric::identity(6));
        assert!(kronecker_with_limit(&a, &b, 3).is_err());
    }
}
