//! One-shot fit: explore, approximate per support point, summarize.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::approx::{log_hyper_posterior, GaussianApprox};
use super::explore::{explore_hyperparameters, EngineConfig, HyperGrid};
use super::marginals::{hyper_marginals, mixture_marginals, HyperMarginal, LatentMarginal};
use crate::error::{LgmError, Result};
use crate::model::ModelAssembly;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub method: String,
    pub latent_marginals: Vec<LatentMarginal>,
    pub hyper_marginals: Vec<HyperMarginal>,
    pub log_marginal_likelihood: f64,
    pub hyper_names: Vec<String>,
    /// Internal-scale coordinates of the grid mode point.
    pub mode: Vec<f64>,
    pub n_support_points: usize,
    pub newton_iterations: Vec<usize>,
    pub mode_search_iterations: usize,
    pub warnings: Vec<String>,
    pub runtime_seconds: f64,
}

impl PosteriorSummary {
    pub fn latent_means(&self) -> Vec<f64> {
        self.latent_marginals.iter().map(|m| m.mean).collect()
    }

    pub fn latent_sds(&self) -> Vec<f64> {
        self.latent_marginals.iter().map(|m| m.sd).collect()
    }

    pub fn hyper(&self, name: &str) -> Option<&HyperMarginal> {
        self.hyper_marginals.iter().find(|h| h.name == name)
    }

    /// Copy with the wall-clock field zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self { runtime_seconds: 0.0, ..self.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub summary: PosteriorSummary,
    pub grid: HyperGrid,
    pub approxes: Vec<GaussianApprox>,
}

/// Summary of a grid with its per-point approximations.
pub fn summarize(method: &str, grid: &HyperGrid, approxes: &[GaussianApprox], cfg: &EngineConfig, started: Instant) -> PosteriorSummary {
    let vars: Vec<Vec<f64>> = cfg.exec.map(approxes.len(), |k| approxes[k].marginal_variances());
    let means: Vec<&[f64]> = approxes.iter().map(|a| a.mode.as_slice()).collect();
    let iterations: Vec<usize> = approxes.iter().map(|a| a.iterations).collect();
    summarize_with_variances(method, grid, &means, &vars, &iterations, cfg, started)
}

/// Summary from per-point means and marginal variances.
pub fn summarize_with_variances(
    method: &str,
    grid: &HyperGrid,
    means: &[&[f64]],
    vars: &[Vec<f64>],
    newton_iterations: &[usize],
    cfg: &EngineConfig,
    started: Instant,
) -> PosteriorSummary {
    let weights = grid.normalized_weights();
    let latent = mixture_marginals(&weights, means, vars, cfg.density_points);
    let (hyper, mut warnings) = hyper_marginals(grid, 201);
    let mut all = grid.warnings.clone();
    all.append(&mut warnings);
    PosteriorSummary {
        method: method.to_string(),
        latent_marginals: latent,
        hyper_marginals: hyper,
        log_marginal_likelihood: grid.log_marginal_likelihood(),
        hyper_names: grid.names.clone(),
        mode: grid.points[grid.mode_index].clone(),
        n_support_points: grid.len(),
        newton_iterations: newton_iterations.to_vec(),
        mode_search_iterations: grid.mode_search.as_ref().map_or(0, |m| m.iterations),
        warnings: all,
        runtime_seconds: started.elapsed().as_secs_f64(),
    }
}

pub fn fit(model: &ModelAssembly, cfg: &EngineConfig) -> Result<FitOutput> {
    let started = Instant::now();
    let (grid, approxes) = explore_hyperparameters(model, cfg)?;
    let summary = summarize("full", &grid, &approxes, cfg, started);
    Ok(FitOutput { summary, grid, approxes })
}

/// Fit on prescribed support points and weights instead of exploring.
pub fn fit_on_grid(model: &ModelAssembly, template: &HyperGrid, cfg: &EngineConfig) -> Result<FitOutput> {
    let started = Instant::now();
    if template.dim() != model.hyper().n_free() {
        return Err(LgmError::DimensionMismatch { context: "grid dimension", expected: model.hyper().n_free(), found: template.dim() });
    }
    let evals = cfg.exec.try_map(template.len(), |k| log_hyper_posterior(model, &template.points[k], None, &cfg.newton))?;
    let mut grid = template.clone();
    let mut approxes = Vec::with_capacity(evals.len());
    for (k, (ld, a)) in evals.into_iter().enumerate() {
        grid.log_density[k] = ld;
        approxes.push(a);
    }
    grid.mode_index = grid.argmax();
    grid.mode_search = None;
    let summary = summarize("full_on_grid", &grid, &approxes, cfg, started);
    Ok(FitOutput { summary, grid, approxes })
}
