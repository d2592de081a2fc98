use lgm_harness::config::{CategoricalConfig, CountFamily, PoissonDeskConfig, RegionStructure, Scenario, SpatialFusionConfig, SpatiotemporalConfig};
use lgm_harness::dataset::Dataset;
use lgm_harness::simulate::{fusion_regions, simulate};

fn small_fusion() -> SpatialFusionConfig {
    SpatialFusionConfig { nrow: 6, ncol: 6, n_points: 5, ..Default::default() }
}

/// Expert residuals `value - intercept - alpha * regional mean`, paired by region.
fn expert_residuals(c: &SpatialFusionConfig, data: &Dataset, predictor: &[f64]) -> Vec<[f64; 2]> {
    let regions = fusion_regions(c.nrow, c.ncol, c.structure);
    let mut out = vec![[f64::NAN; 2]; regions.len()];
    for r in &data.records {
        if r.source == 0 {
            continue;
        }
        let j = r.level.unwrap();
        let m = &regions[j].members;
        let mean = m.iter().map(|&s| predictor[s]).sum::<f64>() / m.len() as f64;
        out[j][r.source - 1] = r.response - c.expert_intercepts[r.source - 1] - c.alpha * mean;
    }
    out
}

#[test]
fn noiseless_experts_report_regional_means() {
    for structure in [RegionStructure::S1, RegionStructure::S2] {
        let c = SpatialFusionConfig { structure, expert_taus: [1e14, 1e14], expert_nugget: 1e14, expert_intercepts: [0.3, -0.2], alpha: 0.7, ..small_fusion() };
        let (data, truth) = simulate(&Scenario::SpatialFusion(c.clone()), 2).unwrap();
        for r in expert_residuals(&c, &data, &truth.get("predictor").unwrap()) {
            assert!(r[0].abs() < 1e-6 && r[1].abs() < 1e-6, "{r:?}");
        }
    }
}

#[test]
fn expert_noise_correlation_matches_configuration() {
    let c = SpatialFusionConfig { expert_taus: [25.0, 9.0], expert_rho: 0.5, expert_nugget: 1e10, ..small_fusion() };
    let mut pairs = Vec::new();
    let mut seed = 0;
    while pairs.len() < 10_000 {
        let (data, truth) = simulate(&Scenario::SpatialFusion(c.clone()), seed).unwrap();
        pairs.extend(expert_residuals(&c, &data, &truth.get("predictor").unwrap()));
        seed += 1;
    }
    let n = pairs.len() as f64;
    let mean = |k: usize| pairs.iter().map(|p| p[k]).sum::<f64>() / n;
    let (m0, m1) = (mean(0), mean(1));
    let var = |k: usize, m: f64| pairs.iter().map(|p| (p[k] - m).powi(2)).sum::<f64>() / n;
    let cov = pairs.iter().map(|p| (p[0] - m0) * (p[1] - m1)).sum::<f64>() / n;
    let (v0, v1) = (var(0, m0), var(1, m1));
    let rho = cov / (v0 * v1).sqrt();
    assert!((rho - 0.5).abs() < 0.02, "correlation {rho}");
    assert!((v0 * 25.0 - 1.0).abs() < 0.05, "variance {v0}");
    assert!((v1 * 9.0 - 1.0).abs() < 0.05, "variance {v1}");
}

#[test]
fn spatiotemporal_series_has_the_configured_lag_one_correlation() {
    let c = SpatiotemporalConfig { nrow: 2, ncol: 2, n_time: 20_000, rho_t: 0.7, ..Default::default() };
    let (_, truth) = simulate(&Scenario::Spatiotemporal(c.clone()), 5).unwrap();
    let st = truth.get("st").unwrap();
    let series: Vec<f64> = (0..c.n_time).map(|t| st[t * 4 + 1]).collect();
    let m = series.iter().sum::<f64>() / series.len() as f64;
    let num: f64 = series.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    let den: f64 = series.iter().map(|v| (v - m).powi(2)).sum();
    assert!((num / den - 0.7).abs() < 0.05, "lag-1 autocorrelation {}", num / den);
}

#[test]
fn noiseless_spatiotemporal_responses_are_the_field() {
    let c = SpatiotemporalConfig { nrow: 3, ncol: 2, n_time: 8, tau_y: 1e14, ..Default::default() };
    let (data, truth) = simulate(&Scenario::Spatiotemporal(c.clone()), 1).unwrap();
    let st = truth.get("st").unwrap();
    assert_eq!(data.len(), 48);
    for r in &data.records {
        let node = r.time.unwrap() * 6 + r.site.unwrap();
        assert!((r.response - c.beta0 - st[node]).abs() < 1e-6);
    }
}

#[test]
fn seeded_simulations_give_identical_csv() {
    let scenarios = [
        Scenario::SpatialFusion(small_fusion()),
        Scenario::SpatialFusion(SpatialFusionConfig { structure: RegionStructure::S2, ..small_fusion() }),
        Scenario::Categorical(CategoricalConfig::default()),
        Scenario::Spatiotemporal(SpatiotemporalConfig { nrow: 2, ncol: 3, n_time: 5, ..Default::default() }),
        Scenario::Spatiotemporal(SpatiotemporalConfig { nrow: 2, ncol: 3, n_time: 5, family: CountFamily::Poisson, ..Default::default() }),
        Scenario::PoissonDesk(PoissonDeskConfig::default()),
    ];
    for s in &scenarios {
        let (a, ta) = simulate(s, 9).unwrap();
        let (b, tb) = simulate(s, 9).unwrap();
        let (c, _) = simulate(s, 10).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert_eq!(ta.to_csv().unwrap(), tb.to_csv().unwrap());
        assert_ne!(a.to_csv().unwrap(), c.to_csv().unwrap(), "{}", s.kind());
        assert_eq!(Dataset::from_csv(&a.to_csv().unwrap()).unwrap(), a);
    }
}

#[test]
fn categorical_coarse_truth_aggregates_fine_truth() {
    for seed in 0..20 {
        let (data, truth) = simulate(&Scenario::Categorical(CategoricalConfig::default()), seed).unwrap();
        let ua = truth.get("u_a").unwrap();
        let ub = truth.get("u_b").unwrap();
        assert_eq!(ua.iter().sum::<f64>(), 0.0);
        assert_eq!(ub, vec![ua[0] + ua[1] + ua[2], ua[3], ua[4]]);
        assert!(data.records.iter().all(|r| r.level.unwrap() < if r.source == 0 { 5 } else { 3 }));
    }
}
