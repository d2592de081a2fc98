mod common;

use common::*;
use lgm_core::gmrf::SparseRows;
use lgm_core::hyper::{HyperLayout, HyperSpec};
use lgm_core::laplace::{fit, fit_on_grid, EngineConfig, Strategy};
use lgm_core::likelihood::{LikelihoodSpec, ObservationBlock};
use lgm_core::model::{BlockKind, LatentBlockSpec, ModelAssembly};
use lgm_core::recursive::{fit_recursive, init_recursion, RecursiveConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn split(model: &ModelAssembly, parts: &[Vec<usize>]) -> Vec<Vec<ObservationBlock>> {
    parts.iter().map(|rows| vec![model.observations()[0].select(rows)]).collect()
}

fn random_parts(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = vec![Vec::new(); k];
    for (j, i) in idx.into_iter().enumerate() {
        parts[j % k].push(i);
    }
    parts.iter_mut().for_each(|p| p.sort());
    parts
}

fn contiguous_parts(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..k).map(|j| (j * n / k..(j + 1) * n / k).collect()).collect()
}

/// AR1 latent field with free precision and correlation, Gaussian observations with free noise.
fn ar1_gaussian(n: usize, n_obs: usize, seed: u64) -> ModelAssembly {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n_obs {
        let i = rng.random_range(0..n);
        rows.push(vec![(i, 1.0)]);
        y.push(truth[i] + rng.random_range(-0.5..0.5));
    }
    let hyper = HyperLayout::new(vec![
        HyperSpec::log_precision("tau_x", 1.0, 0.1, 0.0),
        HyperSpec::correlation("rho", 0.0, 1.0, 0.5),
        HyperSpec::log_precision("tau_y", 1.0, 0.1, 1.0),
    ])
    .unwrap();
    let ob = ObservationBlock::new(y, SparseRows::from_rows(n, rows).unwrap(), LikelihoodSpec::gaussian("tau_y")).unwrap();
    ModelAssembly::new(
        vec![LatentBlockSpec::new("x", BlockKind::Ar1 { n, rho: "rho".into(), precision: "tau_x".into() })],
        vec![ob],
        hyper,
    )
    .unwrap()
}

/// Sum-to-zero RW1 field plus a fixed intercept, Gaussian observations.
fn rw1_gaussian(n: usize, n_obs: usize, seed: u64) -> ModelAssembly {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n_obs {
        let i = rng.random_range(0..n);
        rows.push(vec![(0, 1.0), (1 + i, 1.0)]);
        y.push(1.0 + (i as f64 * 0.4).cos() + rng.random_range(-0.3..0.3));
    }
    let hyper = HyperLayout::new(vec![
        HyperSpec::log_precision("tau_u", 1.0, 0.1, 1.0),
        HyperSpec::log_precision("tau_y", 1.0, 0.1, 2.0).fixed_at(8.0).unwrap(),
    ])
    .unwrap();
    let ob = ObservationBlock::new(y, SparseRows::from_rows(n + 1, rows).unwrap(), LikelihoodSpec::gaussian("tau_y")).unwrap();
    ModelAssembly::new(
        vec![
            LatentBlockSpec::new("b0", BlockKind::FixedEffect { mean: vec![0.0], precision: vec![0.01] }),
            LatentBlockSpec::new("u", BlockKind::Rw1 { n, precision: "tau_u".into() }),
        ],
        vec![ob],
        hyper,
    )
    .unwrap()
}

fn assert_recursive_equals_full(model: &ModelAssembly, parts: &[Vec<usize>], cfg: &RecursiveConfig) {
    let (summary, state) = fit_recursive(model, split(model, parts), cfg).unwrap();
    let full = fit_on_grid(model, &state.grid, &cfg.engine).unwrap();
    for (a, b) in summary.latent_marginals.iter().zip(&full.summary.latent_marginals) {
        assert!((a.mean - b.mean).abs() < 1e-6, "mean {} vs {}", a.mean, b.mean);
        assert!((a.sd - b.sd).abs() < 1e-6);
    }
    let c = state.grid.log_density[0] - full.grid.log_density[0];
    for (a, b) in state.grid.log_density.iter().zip(&full.grid.log_density) {
        assert!((a - b - c).abs() < 1e-6, "log density {a} vs {b} (shift {c})");
    }
    for (p, a) in state.priors.iter().zip(&full.approxes) {
        assert!(p.precision.rel_frobenius_diff(&a.precision) < 1e-8);
        for (x, y) in p.mean.iter().zip(&a.mode) {
            assert!((x - y).abs() < 1e-8);
        }
    }
}

#[test]
fn gaussian_recursion_is_exact_for_random_and_contiguous_partitions() {
    let model = ar1_gaussian(40, 120, 1);
    let cfg = RecursiveConfig::default();
    for k in 2..=8 {
        assert_recursive_equals_full(&model, &random_parts(120, k, k as u64), &cfg);
        assert_recursive_equals_full(&model, &contiguous_parts(120, k), &cfg);
    }
}

#[test]
fn gaussian_recursion_is_exact_with_sum_to_zero_block() {
    let model = rw1_gaussian(15, 90, 4);
    let cfg = RecursiveConfig { engine: EngineConfig { strategy: Strategy::AxisGrid, ..Default::default() }, ..Default::default() };
    for k in [2, 3, 5] {
        assert_recursive_equals_full(&model, &random_parts(90, k, 10 + k as u64), &cfg);
    }
}

#[test]
fn partition_order_does_not_matter_for_gaussians() {
    let model = ar1_gaussian(30, 90, 2);
    let cfg = RecursiveConfig::default();
    let parts = random_parts(90, 4, 3);
    let (a, sa) = fit_recursive(&model, split(&model, &parts), &cfg).unwrap();
    let mut rev = parts.clone();
    rev[1..].reverse();
    let (b, sb) = fit_recursive(&model, split(&model, &rev), &cfg).unwrap();
    for (x, y) in a.latent_marginals.iter().zip(&b.latent_marginals) {
        assert!((x.mean - y.mean).abs() < 1e-8);
        assert!((x.sd - y.sd).abs() < 1e-8);
    }
    for (x, y) in sa.grid.log_density.iter().zip(&sb.grid.log_density) {
        assert!((x - y).abs() < 1e-8);
    }
}

#[test]
fn accumulation_identity_and_fixed_support() {
    let model = ar1_gaussian(25, 80, 5);
    let cfg = RecursiveConfig::default();
    let parts = split(&model, &random_parts(80, 5, 8));
    let mut it = parts.into_iter();
    let mut state = init_recursion(&model, it.next().unwrap(), &cfg).unwrap();
    let points = state.grid.points.clone();
    let weights = state.grid.weights.clone();
    for p in it {
        state = state.step(p).unwrap();
        assert_eq!(state.history.len(), state.step);
        assert!(state.history.iter().all(|h| h.len() == state.len()));
        for (a, b) in state.accumulated().iter().zip(&state.grid.log_density) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(state.grid.points, points);
        assert_eq!(state.grid.weights, weights);
    }
}

#[test]
fn single_partition_equals_direct_fit() {
    let model = ar1_gaussian(20, 50, 6);
    let cfg = RecursiveConfig::default();
    let state = init_recursion(&model, model.observations().to_vec(), &cfg).unwrap();
    let direct = fit(&model, &cfg.engine).unwrap();
    assert_eq!(state.grid.points, direct.grid.points);
    let s = state.finalize().unwrap();
    assert_eq!(s.latent_marginals, direct.summary.latent_marginals);
    assert_eq!(s.hyper_marginals, direct.summary.hyper_marginals);
    assert_eq!(s.log_marginal_likelihood, direct.summary.log_marginal_likelihood);
}

#[test]
fn empty_partition_only_advances_the_counter() {
    let model = ar1_gaussian(20, 50, 7);
    let cfg = RecursiveConfig::default();
    let state = init_recursion(&model, model.observations().to_vec(), &cfg).unwrap();
    let before = state.grid.log_density.clone();
    let means: Vec<Vec<f64>> = state.priors.iter().map(|p| p.mean.clone()).collect();
    let state = state.step(vec![model.observations()[0].select(&[])]).unwrap();
    assert_eq!(state.step, 2);
    assert_eq!(state.grid.log_density, before);
    assert_eq!(state.history[1], vec![0.0; state.len()]);
    assert_eq!(state.priors.iter().map(|p| p.mean.clone()).collect::<Vec<_>>(), means);
}

#[test]
fn poisson_two_partitions_match_quadrature_up_to_constant() {
    let y = vec![3.0, 5.0, 2.0, 4.0, 1.0, 6.0];
    let model = one_node_model(y.clone(), LikelihoodSpec::poisson(), true);
    let cfg = RecursiveConfig::default();
    let (_, state) = fit_recursive(&model, split(&model, &[vec![0, 1, 2], vec![3, 4, 5]]), &cfg).unwrap();
    let us: Vec<f64> = state.grid.points.iter().map(|p| p[0]).collect();
    let oracle = quadrature_one_node(&y, true, &us);
    let diffs: Vec<f64> = state.grid.log_density.iter().zip(&oracle.log_joint_u).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    for d in &diffs {
        assert!((d - mean).abs() < 5e-2, "{diffs:?}");
    }
}

#[test]
fn stationary_partitions_keep_the_mode_point() {
    let model = gaussian_iid_model(10, 60, 12, true);
    let cfg = RecursiveConfig::default();
    // same observations in every partition
    let parts = vec![model.observations().to_vec(); 2];
    let (_, state) = fit_recursive(&model, parts, &cfg).unwrap();
    let d = state.mode_shift_diagnostic();
    assert!(d.per_step_mode_shift.iter().all(|s| *s >= 0.0));
    assert!(d.boundary_mass_fraction <= 1.0);
    assert!(!d.flagged);
}

#[test]
fn drifting_noise_level_raises_the_flag() {
    // partition 1: noisy; partition 2: much larger, far less noisy sample
    let n = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for r in 0..400 {
        let i = r % n;
        rows.push(vec![(i, 1.0)]);
        let sd = if r < 40 { 1.0 } else { 0.1 };
        y.push(sd * (rng.random::<f64>() - 0.5) * 12f64.sqrt());
    }
    let hyper = HyperLayout::new(vec![
        HyperSpec::log_precision("tau_x", 1.0, 1.0, 0.0).fixed_at(1.0).unwrap(),
        HyperSpec::log_precision("tau_y", 1.0, 0.01, 0.0),
    ])
    .unwrap();
    let ob = ObservationBlock::new(y, SparseRows::from_rows(n, rows).unwrap(), LikelihoodSpec::gaussian("tau_y")).unwrap();
    let model = ModelAssembly::new(vec![LatentBlockSpec::new("x", BlockKind::Iid { n, precision: "tau_x".into() })], vec![ob], hyper).unwrap();
    let cfg = RecursiveConfig { engine: EngineConfig { strategy: Strategy::AxisGrid, ..Default::default() }, ..Default::default() };
    let parts = vec![(0..40).collect::<Vec<_>>(), (40..400).collect()];
    let (_, state) = fit_recursive(&model, split(&model, &parts), &cfg).unwrap();
    let full = fit(&model, &cfg.engine).unwrap();
    // the full-data mode sits more than two partition-1 sds away
    let sd1 = state.grid.scaling[0][0].abs();
    assert!((full.grid.mode[0] - state.grid.mode[0]).abs() > 2.0 * sd1);
    let d = state.mode_shift_diagnostic();
    assert!(d.flagged, "{d:?}");
    assert!(d.per_step_mode_shift[1] > 0.0);
}

#[test]
fn trace_has_one_row_per_step_and_point() {
    let model = ar1_gaussian(20, 60, 9);
    let (_, state) = fit_recursive(&model, split(&model, &contiguous_parts(60, 3)), &RecursiveConfig::default()).unwrap();
    let csv = state.trace_csv();
    assert_eq!(csv.lines().count(), 1 + 3 * state.len());
    let dir = tempfile::tempdir().unwrap();
    state.write_trace(dir.path()).unwrap();
    assert!(dir.path().join("recursive_trace.csv").exists());
}
