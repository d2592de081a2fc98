//! Seeded simulators for the fusion, categorical, spatio-temporal and desk scenarios.

use lgm_core::fusion::Region;
use lgm_core::gmrf::builders::{build_ar1_precision, build_lattice_matern_precision, kronecker};
use lgm_core::gmrf::{cholesky, JitterPolicy, SparseSymmetric};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::config::{
    CategoricalConfig, CountFamily, PoissonDeskConfig, RegionStructure, Scenario, SpatialFusionConfig, SpatiotemporalConfig,
};
use crate::dataset::{Dataset, Record, Truth};
use crate::error::Result;

pub fn simulate(scenario: &Scenario, seed: u64) -> Result<(Dataset, Truth)> {
    match scenario {
        Scenario::SpatialFusion(c) => simulate_spatial_fusion(c, seed),
        Scenario::Categorical(c) => Ok(simulate_categorical(c, seed)),
        Scenario::Spatiotemporal(c) => simulate_spatiotemporal(c, seed),
        Scenario::PoissonDesk(c) => simulate_poisson_desk(c, seed),
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_field(q: &SparseSymmetric, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let f = cholesky(q, &JitterPolicy::none())?;
    Ok(f.sample(&vec![0.0; q.dim()], rng.random())?)
}

fn poisson(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    Poisson::new(rate).map_or(0.0, |p| p.sample(rng))
}

/// Expert regions for a lattice: `S1` is a 3 x 3 block cover, `S2` four irregular patches.
pub fn fusion_regions(nrow: usize, ncol: usize, structure: RegionStructure) -> Vec<Region> {
    let cell = |r: usize, c: usize| r * ncol + c;
    let band = |n: usize, k: usize| (k * n / 3, (k + 1) * n / 3);
    match structure {
        RegionStructure::S1 => (0..9)
            .map(|k| {
                let (r0, r1) = band(nrow, k / 3);
                let (c0, c1) = band(ncol, k % 3);
                let members = (r0..r1).flat_map(|r| (c0..c1).map(move |c| cell(r, c))).collect();
                Region::new(format!("S1_{k}"), members)
            })
            .collect(),
        RegionStructure::S2 => {
            let f = |n: usize, x: f64| ((n as f64 * x).round() as usize).min(n);
            let rect = |r0: f64, r1: f64, c0: f64, c1: f64| -> Vec<usize> {
                (f(nrow, r0)..f(nrow, r1)).flat_map(|r| (f(ncol, c0)..f(ncol, c1)).map(move |c| cell(r, c))).collect()
            };
            let a = rect(0.0, 0.34, 0.0, 0.47);
            let b = rect(0.1, 0.4, 0.6, 0.94);
            let c = rect(0.54, 0.94, 0.07, 0.3);
            // L-shaped patch
            let mut d = rect(0.6, 0.94, 0.47, 0.6);
            d.extend(rect(0.8, 0.94, 0.6, 0.87));
            [a, b, c, d]
                .into_iter()
                .enumerate()
                .map(|(k, mut m)| {
                    m.sort_unstable();
                    m.dedup();
                    Region::new(format!("S2_{k}"), m)
                })
                .collect()
        }
    }
}

/// Point observations of `β0 + u_s` plus two correlated expert sources reporting regional means.
pub fn simulate_spatial_fusion(c: &SpatialFusionConfig, seed: u64) -> Result<(Dataset, Truth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = c.nrow * c.ncol;
    let q = build_lattice_matern_precision(c.nrow, c.ncol, c.range, c.tau_s)?;
    let u = draw_field(&q, &mut rng)?;
    let predictor: Vec<f64> = u.iter().map(|v| c.beta0 + v).collect();
    let mut records = Vec::new();
    let mut sites: Vec<usize> = (0..n).collect();
    for i in 0..c.n_points.min(n) {
        let j = rng.random_range(i..n);
        sites.swap(i, j);
    }
    let mut points = sites[..c.n_points.min(n)].to_vec();
    points.sort_unstable();
    for &s in &points {
        records.push(Record::new(0, predictor[s] + normal(&mut rng) / c.tau_y.sqrt()).site(s));
    }
    let regions = fusion_regions(c.nrow, c.ncol, c.structure);
    let (t1, t2, rho) = (c.expert_taus[0], c.expert_taus[1], c.expert_rho);
    for (j, r) in regions.iter().enumerate() {
        let mean = r.members.iter().map(|&s| predictor[s]).sum::<f64>() / r.members.len() as f64;
        let (z1, z2) = (normal(&mut rng), normal(&mut rng));
        let e = [z1 / t1.sqrt(), (rho * z1 + (1.0 - rho * rho).sqrt() * z2) / t2.sqrt()];
        for k in 0..2 {
            let nugget = normal(&mut rng) / c.expert_nugget.sqrt();
            records.push(Record::new(k + 1, c.expert_intercepts[k] + c.alpha * mean + e[k] + nugget).level(j));
        }
    }
    let mut truth = Truth::default();
    truth.push("beta0", &[c.beta0]);
    truth.push("field", &u);
    truth.push("predictor", &predictor);
    truth.push("beta_ex", &c.expert_intercepts);
    truth.push("hyper:tau_s", &[c.tau_s]);
    truth.push("hyper:tau_y", &[c.tau_y]);
    Ok((Dataset { records }, truth))
}

/// Groups of fine levels forming the coarse levels: `{0,1,2}, {3}, {4}`.
pub fn categorical_groups() -> Vec<Vec<usize>> {
    vec![vec![0, 1, 2], vec![3], vec![4]]
}

/// Two Gaussian sources: five fine levels and three coarse levels with `u_b1 = u_a1 + u_a2 + u_a3`.
pub fn simulate_categorical(c: &CategoricalConfig, seed: u64) -> (Dataset, Truth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..5).map(|_| normal(&mut rng) / c.tau_u.sqrt()).collect();
    let mean = raw.iter().sum::<f64>() / 5.0;
    let mut ua: Vec<f64> = raw.iter().map(|v| v - mean).collect();
    // exact sum-to-zero
    ua[4] = -ua[..4].iter().sum::<f64>();
    let ub: Vec<f64> = categorical_groups().iter().map(|g| g.iter().map(|&i| ua[i]).sum()).collect();
    let sd = 1.0 / c.tau_y.sqrt();
    let mut records = Vec::new();
    for (i, u) in ua.iter().enumerate() {
        for _ in 0..c.n_per_fine {
            records.push(Record::new(0, c.beta0 + u + sd * normal(&mut rng)).level(i));
        }
    }
    for (k, u) in ub.iter().enumerate() {
        for _ in 0..c.n_per_coarse {
            records.push(Record::new(1, c.beta0 + u + sd * normal(&mut rng)).level(k));
        }
    }
    let mut truth = Truth::default();
    truth.push("beta0", &[c.beta0]);
    truth.push("u_a", &ua);
    truth.push("u_b", &ub);
    truth.push("hyper:tau_u", &[c.tau_u]);
    (Dataset { records }, truth)
}

/// Separable AR1-in-time by lattice-in-space field; one observation per site and time.
pub fn simulate_spatiotemporal(c: &SpatiotemporalConfig, seed: u64) -> Result<(Dataset, Truth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = c.nrow * c.ncol;
    let q = kronecker(
        &build_ar1_precision(c.n_time, c.rho_t, 1.0)?,
        &build_lattice_matern_precision(c.nrow, c.ncol, c.range, c.tau_st)?,
    )?;
    let u = draw_field(&q, &mut rng)?;
    let mut records = Vec::with_capacity(ns * c.n_time);
    for t in 0..c.n_time {
        for s in 0..ns {
            let eta = c.beta0 + u[t * ns + s];
            let y = match c.family {
                CountFamily::Gaussian => eta + normal(&mut rng) / c.tau_y.sqrt(),
                CountFamily::Poisson => poisson(&mut rng, eta.exp()),
            };
            records.push(Record::new(0, y).site(s).time(t));
        }
    }
    let mut truth = Truth::default();
    truth.push("beta0", &[c.beta0]);
    truth.push("st", &u);
    truth.push("hyper:rho_t", &[c.rho_t]);
    truth.push("hyper:tau_st", &[c.tau_st]);
    if c.family == CountFamily::Gaussian {
        truth.push("hyper:tau_y", &[c.tau_y]);
    }
    Ok((Dataset { records }, truth))
}

/// Repeated Poisson counts over a small lattice field; replicate `r` carries time index `r`.
pub fn simulate_poisson_desk(c: &PoissonDeskConfig, seed: u64) -> Result<(Dataset, Truth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = c.nrow * c.ncol;
    let q = build_lattice_matern_precision(c.nrow, c.ncol, c.range, c.tau)?;
    let u = draw_field(&q, &mut rng)?;
    let mut records = Vec::with_capacity(n * c.n_rep);
    for r in 0..c.n_rep {
        for s in 0..n {
            records.push(Record::new(0, poisson(&mut rng, (c.beta0 + u[s]).exp())).site(s).time(r));
        }
    }
    let mut truth = Truth::default();
    truth.push("beta0", &[c.beta0]);
    truth.push("field", &u);
    truth.push("hyper:tau", &[c.tau]);
    Ok((Dataset { records }, truth))
}
