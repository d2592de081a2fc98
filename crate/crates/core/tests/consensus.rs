
use lgm_core::consensus::{
    marginal_consensus, moment_update, multivariate_consensus, sequential_consensus_fit, ConsensusConfig, ConsensusMode, GaussianBelief,
    MomentSummary,
};
use lgm_core::gmrf::builders::build_ar1_precision;
use lgm_core::gmrf::{SparseRows, SparseSymmetric};
use lgm_core::hyper::{HyperLayout, HyperSpec};
use lgm_core::laplace::{fit, EngineConfig};
use lgm_core::likelihood::{LikelihoodSpec, ObservationBlock};
use lgm_core::model::{BlockKind, LatentBlockSpec, ModelAssembly};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn three_partitions_of_a_gaussian_sample_give_the_full_posterior() {
    // y_i ~ N(β, 1/τ), β ~ N(m0, 1/p0)
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y: Vec<f64> = (0..30).map(|_| 2.0 + rng.random_range(-1.0..1.0)).collect();
    let (m0, p0, tau) = (0.5, 0.2, 3.0);
    let post = |prior: MomentSummary, ys: &[f64]| {
        let p = prior.precision + tau * ys.len() as f64;
        MomentSummary::new((prior.precision * prior.mean + tau * ys.iter().sum::<f64>()) / p, p).unwrap()
    };
    let prior0 = MomentSummary::new(m0, p0).unwrap();
    let mut belief = prior0;
    for chunk in y.chunks(10) {
        // each partition is fitted under the current belief
        let fitted = post(belief, chunk);
        belief = moment_update(belief, fitted, belief).unwrap();
    }
    let full = post(prior0, &y);
    assert!((belief.mean - full.mean).abs() < 1e-12);
    assert!((belief.precision - full.precision).abs() < 1e-12);
    // increments extracted from fits under the original prior compose the same way
    let mut alt = prior0;
    for chunk in y.chunks(10) {
        alt = moment_update(alt, post(prior0, chunk), prior0).unwrap();
    }
    assert!((alt.mean - full.mean).abs() < 1e-12);
    assert!((alt.precision - full.precision).abs() < 1e-12);
}

#[test]
fn diagonal_beliefs_agree_between_marginal_and_multivariate() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 12;
    let beliefs: Vec<GaussianBelief> = (0..3)
        .map(|_| {
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..4.0)).collect();
            GaussianBelief { mean: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(), precision: SparseSymmetric::diagonal(&d) }
        })
        .collect();
    let mv = multivariate_consensus(&beliefs).unwrap();
    let mc = marginal_consensus(
        &beliefs.iter().map(|b| b.mean.clone()).collect::<Vec<_>>(),
        &beliefs.iter().map(|b| b.precision.diag()).collect::<Vec<_>>(),
    )
    .unwrap();
    for i in 0..n {
        assert!((mv.mean[i] - mc[i].mean).abs() < 1e-10);
        assert!((mv.precision.get(i, i) - mc[i].precision).abs() < 1e-10);
        assert!((mc[i].weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}

#[test]
fn ar1_beliefs_match_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 25;
    let q1 = build_ar1_precision(n, 0.7, 2.0).unwrap();
    let q2 = build_ar1_precision(n, -0.3, 0.5).unwrap();
    let m1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let m2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = multivariate_consensus(&[GaussianBelief { mean: m1.clone(), precision: q1.clone() }, GaussianBelief { mean: m2.clone(), precision: q2.clone() }]).unwrap();
    // μ = (Q₁ + Q₂)⁻¹ (Q₁μ₁ + Q₂μ₂), Q = Q₁ + Q₂
    let (d1, d2) = (q1.to_dense(), q2.to_dense());
    let q = &d1 + &d2;
    let rhs = &d1 * DVector::from_vec(m1) + &d2 * DVector::from_vec(m2);
    let mu = q.clone().lu().solve(&rhs).unwrap();
    for i in 0..n {
        assert!((c.mean[i] - mu[i]).abs() < 1e-8);
    }
    assert!((c.precision.to_dense() - q).norm() < 1e-12);
}

fn random_belief(seed: u64, n: usize) -> GaussianBelief {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho = rng.random_range(-0.8..0.8);
    let tau = rng.random_range(0.3..3.0);
    GaussianBelief { mean: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(), precision: build_ar1_precision(n, rho, tau).unwrap() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn multivariate_consensus_is_associative_and_commutative(a in 0u64..1000, b in 0u64..1000, c in 0u64..1000) {
        let n = 15;
        let (x, y, z) = (random_belief(a, n), random_belief(b + 1000, n), random_belief(c + 2000, n));
        let flat = multivariate_consensus(&[x.clone(), y.clone(), z.clone()]).unwrap();
        let left = multivariate_consensus(&[multivariate_consensus(&[x.clone(), y.clone()]).unwrap(), z.clone()]).unwrap();
        let swapped = multivariate_consensus(&[z, multivariate_consensus(&[y, x]).unwrap()]).unwrap();
        for i in 0..n {
            prop_assert!((flat.mean[i] - left.mean[i]).abs() < 1e-10);
            prop_assert!((flat.mean[i] - swapped.mean[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn marginal_weights_sum_to_one(p in proptest::collection::vec(0.01f64..100.0, 2..6), m in proptest::collection::vec(-5.0f64..5.0, 6)) {
        let k = p.len();
        let means: Vec<Vec<f64>> = (0..k).map(|j| vec![m[j]]).collect();
        let precs: Vec<Vec<f64>> = p.iter().map(|v| vec![*v]).collect();
        let c = marginal_consensus(&means, &precs).unwrap();
        prop_assert!((c[0].weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let lo = m[..k].iter().copied().fold(f64::INFINITY, f64::min);
        let hi = m[..k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(c[0].mean >= lo - 1e-12 && c[0].mean <= hi + 1e-12);
    }
}

/// AR1 field with fixed hyperparameters and Gaussian data, optionally with a sum-to-zero constraint.
fn fixed_hyper_model(n: usize, n_obs: usize, seed: u64, constrained: bool) -> ModelAssembly {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n_obs {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        rows.push(if i == j { vec![(i, 1.0)] } else { vec![(i.min(j), 0.7), (i.max(j), 0.3)] });
        y.push((i as f64 * 0.2).sin() + rng.random_range(-0.4..0.4));
    }
    let hyper = HyperLayout::new(vec![
        HyperSpec::log_precision("tau_x", 1.0, 0.1, 0.0).fixed_at(2.0).unwrap(),
        HyperSpec::correlation("rho", 0.0, 1.0, 0.0).fixed_at(0.8).unwrap(),
        HyperSpec::log_precision("tau_y", 1.0, 0.1, 0.0).fixed_at(5.0).unwrap(),
    ])
    .unwrap();
    let ob = ObservationBlock::new(y, SparseRows::from_rows(n, rows).unwrap(), LikelihoodSpec::gaussian("tau_y")).unwrap();
    let mut block = LatentBlockSpec::new("x", BlockKind::Ar1 { n, rho: "rho".into(), precision: "tau_x".into() });
    if constrained {
        block = block.with_sum_to_zero();
    }
    ModelAssembly::new(vec![block], vec![ob], hyper).unwrap()
}

fn parts(model: &ModelAssembly, k: usize) -> Vec<Vec<ObservationBlock>> {
    let n = model.observations()[0].len();
    (0..k).map(|j| vec![model.observations()[0].select(&(j * n / k..(j + 1) * n / k).collect::<Vec<_>>())]).collect()
}

#[test]
fn multivariate_consensus_fit_is_exact_for_gaussians() {
    for constrained in [false, true] {
        let model = fixed_hyper_model(30, 90, 4, constrained);
        let full = fit(&model, &EngineConfig::default()).unwrap().summary;
        for k in [2, 3, 5] {
            let (s, _) = sequential_consensus_fit(&model, parts(&model, k), &ConsensusConfig::default()).unwrap();
            assert_eq!(s.method, "sequential_consensus");
            for (a, b) in s.latent_marginals.iter().zip(&full.latent_marginals) {
                assert!((a.mean - b.mean).abs() < 1e-6, "{} vs {}", a.mean, b.mean);
                assert!((a.sd - b.sd).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn marginal_consensus_fit_is_a_cruder_combination() {
    let model = fixed_hyper_model(30, 90, 5, false);
    let full = fit(&model, &EngineConfig::default()).unwrap().summary;
    let cfg = ConsensusConfig { mode: ConsensusMode::Marginal, ..Default::default() };
    let (s, records) = sequential_consensus_fit(&model, parts(&model, 3), &cfg).unwrap();
    assert_eq!(records.len(), 3);
    let dev: f64 = s.latent_marginals.iter().zip(&full.latent_marginals).map(|(a, b)| (a.mean - b.mean).abs()).sum();
    assert!(dev.is_finite() && dev > 1e-6);
}

#[test]
fn single_partition_is_the_plain_fit() {
    let model = fixed_hyper_model(20, 40, 6, false);
    let full = fit(&model, &EngineConfig::default()).unwrap().summary;
    let (s, _) = sequential_consensus_fit(&model, parts(&model, 1), &ConsensusConfig::default()).unwrap();
    assert_eq!(s.latent_marginals, full.latent_marginals);
    assert_eq!(s.hyper_marginals, full.hyper_marginals);
}

#[test]
fn fixed_effects_and_hypers_are_updated_sequentially() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 10;
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for _ in 0..120 {
        let i = rng.random_range(0..n);
        rows.push(vec![(0, 1.0), (1 + i, 1.0)]);
        y.push(1.5 + 0.3 * (i as f64).cos() + rng.random_range(-0.5..0.5));
    }
    let hyper = HyperLayout::new(vec![HyperSpec::log_precision("tau_u", 1.0, 0.1, 1.0), HyperSpec::log_precision("tau_y", 1.0, 0.1, 2.0)]).unwrap();
    let ob = ObservationBlock::new(y, SparseRows::from_rows(n + 1, rows).unwrap(), LikelihoodSpec::gaussian("tau_y")).unwrap();
    let model = ModelAssembly::new(
        vec![
            LatentBlockSpec::new("b0", BlockKind::FixedEffect { mean: vec![0.0], precision: vec![0.001] }),
            LatentBlockSpec::new("u", BlockKind::Iid { n, precision: "tau_u".into() }),
        ],
        vec![ob],
        hyper,
    )
    .unwrap();
    let full = fit(&model, &EngineConfig::default()).unwrap().summary;
    let (s, records) = sequential_consensus_fit(&model, parts(&model, 3), &ConsensusConfig::default()).unwrap();
    assert_eq!(records.len(), 3);
    // hyperparameter precision grows as partitions accumulate
    for h in 0..2 {
        assert!(records[2].hyper_moments[h].precision > records[0].hyper_moments[h].precision);
    }
    assert!((s.latent_marginals[0].mean - full.latent_marginals[0].mean).abs() < 3.0 * full.latent_marginals[0].sd);
}
