#![allow(dead_code)]

use lgm_core::gmrf::SparseRows;
use lgm_core::hyper::{HyperLayout, HyperSpec};
use lgm_core::likelihood::{LikelihoodSpec, ObservationBlock};
use lgm_core::model::{BlockKind, LatentBlockSpec, ModelAssembly};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Dense log N(y; 0, Σ).
pub fn log_mvn_zero(y: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance must be PD");
    let ld: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let a = chol.solve(y);
    -0.5 * (y.len() as f64 * LN_2PI + ld + y.dot(&a))
}

/// Dense conjugate posterior for x ~ N(0, Q⁻¹), y = A x + ε, ε ~ N(0, diag(1/τ)).
pub struct DenseConjugate {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub log_evidence: f64,
}

pub fn dense_conjugate(q: &DMatrix<f64>, a: &DMatrix<f64>, tau: &[f64], y: &[f64]) -> DenseConjugate {
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(tau));
    let y = DVector::from_column_slice(y);
    let post = q + a.transpose() * &d * a;
    let mean = post.clone().cholesky().unwrap().solve(&(a.transpose() * &d * &y));
    let qinv = q.clone().try_inverse().unwrap();
    let mut cov_y = a * qinv * a.transpose();
    for i in 0..y.len() {
        cov_y[(i, i)] += 1.0 / tau[i];
    }
    DenseConjugate { mean, precision: post, log_evidence: log_mvn_zero(&y, &cov_y) }
}

pub fn design_dense(rows: &SparseRows) -> DMatrix<f64> {
    rows.to_dense()
}

/// iid latent block of size `n` with precision hyper `tau_x`, Gaussian observations of random sparse rows.
pub fn gaussian_iid_model(n: usize, n_obs: usize, seed: u64, tau_x_free: bool) -> ModelAssembly {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n_obs {
        let k = rng.random_range(1..=3.min(n));
        let mut r: Vec<(usize, f64)> = (0..k).map(|_| (rng.random_range(0..n), rng.random_range(-1.5..1.5))).collect();
        r.sort_by_key(|e| e.0);
        r.dedup_by_key(|e| e.0);
        y.push(rng.random_range(-2.0..2.0));
        rows.push(r);
    }
    let design = SparseRows::from_rows(n, rows).unwrap();
    let tx = HyperSpec::log_precision("tau_x", 1.0, 0.5, 0.0);
    let tx = if tau_x_free { tx } else { tx.fixed_at(1.5).unwrap() };
    let hyper = HyperLayout::new(vec![tx, HyperSpec::log_precision("tau_y", 1.0, 1.0, 0.0).fixed_at(2.0).unwrap()]).unwrap();
    let ob = ObservationBlock::new(y, design, LikelihoodSpec::gaussian("tau_y")).unwrap();
    ModelAssembly::new(vec![LatentBlockSpec::new("x", BlockKind::Iid { n, precision: "tau_x".into() })], vec![ob], hyper).unwrap()
}

/// One latent node with prior precision `tau` (free, log-gamma(1,1) prior) and Poisson/Bernoulli data.
pub fn one_node_model(y: Vec<f64>, lik: LikelihoodSpec, tau_free: bool) -> ModelAssembly {
    let n = y.len();
    let design = SparseRows::from_rows(1, vec![vec![(0, 1.0)]; n]).unwrap();
    let t = HyperSpec::log_precision("tau", 1.0, 1.0, 0.0);
    let t = if tau_free { t } else { t.fixed_at(1.0).unwrap() };
    let hyper = HyperLayout::new(vec![t]).unwrap();
    let ob = ObservationBlock::new(y, design, lik).unwrap();
    ModelAssembly::new(vec![LatentBlockSpec::new("x", BlockKind::Iid { n: 1, precision: "tau".into() })], vec![ob], hyper).unwrap()
}

/// Trapezoid integral of exp(f) over a uniform grid, returned on the log scale.
pub fn log_trapz_exp(xs: &[f64], f: &[f64]) -> f64 {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let h = xs[1] - xs[0];
    let s: f64 = f.iter().enumerate().map(|(i, v)| {
        let w = if i == 0 || i + 1 == f.len() { 0.5 } else { 1.0 };
        w * (v - m).exp()
    }).sum();
    m + (s * h).ln()
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// log p(y | x) for a single-node model with identity design.
pub fn one_node_loglik(y: &[f64], x: f64, poisson: bool) -> f64 {
    y.iter()
        .map(|&v| {
            if poisson {
                v * x - x.exp() - lgamma(v + 1.0)
            } else {
                let p = -(1.0 + (-x).exp()).ln();
                let q = -(1.0 + x.exp()).ln();
                if v > 0.5 { p } else { q }
            }
        })
        .sum()
}

pub fn lgamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Brute-force quadrature over (x, log τ) for the one-node model with a log-gamma(1,1) prior on log τ.
pub struct Quadrature1 {
    pub u: Vec<f64>,
    /// log π(u | y) up to the evidence.
    pub log_joint_u: Vec<f64>,
    pub log_evidence: f64,
}

pub fn quadrature_one_node(y: &[f64], poisson: bool, u_grid: &[f64]) -> Quadrature1 {
    let xs = linspace(-12.0, 12.0, 4801);
    let log_joint_u: Vec<f64> = u_grid
        .iter()
        .map(|&u| {
            let tau = u.exp();
            let lp_u = u - u.exp();
            let f: Vec<f64> = xs
                .iter()
                .map(|&x| one_node_loglik(y, x, poisson) + 0.5 * (tau.ln() - LN_2PI) - 0.5 * tau * x * x)
                .collect();
            log_trapz_exp(&xs, &f) + lp_u
        })
        .collect();
    let log_evidence = log_trapz_exp(u_grid, &log_joint_u);
    Quadrature1 { u: u_grid.to_vec(), log_joint_u, log_evidence }
}
