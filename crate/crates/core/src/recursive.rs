//! Recursive inference over data partitions on a fixed set of support points.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{LgmError, Result};
use crate::laplace::approx::{approximate_with_prior, belief_variances};
use crate::laplace::explore::{explore_hyperparameters_with, EngineConfig, HyperGrid, Strategy};
use crate::laplace::fit::{summarize_with_variances, PosteriorSummary};
use crate::likelihood::ObservationBlock;
use crate::model::{LatentPrior, ModelAssembly};

pub const TRACE_FILE: &str = "recursive_trace.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecursiveConfig {
    pub engine: EngineConfig,
    /// Flag when the boundary mass exceeds its step-1 value by more than this.
    pub boundary_threshold: f64,
}

impl Default for RecursiveConfig {
    fn default() -> Self {
        Self { engine: EngineConfig::default(), boundary_threshold: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub n_observations: usize,
    pub cond_log_ml: Vec<f64>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub failed: Vec<bool>,
    pub mode_shift: f64,
    pub boundary_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftDiagnostics {
    pub per_step_mode_shift: Vec<f64>,
    pub per_step_boundary_mass: Vec<f64>,
    pub boundary_mass_fraction: f64,
    pub initial_boundary_mass: f64,
    pub flagged: bool,
}

/// Snapshot after some number of partitions.
#[derive(Debug, Clone)]
pub struct RecursiveState {
    base: ModelAssembly,
    pub config: RecursiveConfig,
    /// Support points and weights are those of step 1; `log_density` accumulates.
    pub grid: HyperGrid,
    pub priors: Vec<LatentPrior>,
    pub step: usize,
    /// Row 0 holds the step-1 log densities, later rows the conditional log marginal likelihoods.
    pub history: Vec<Vec<f64>>,
    pub records: Vec<StepRecord>,
    /// Points whose Newton iteration failed to converge at some step.
    pub flagged: Vec<bool>,
    /// Points whose factorization failed; they carry a −∞ density.
    pub failed: Vec<bool>,
    pub started: Instant,
}

fn shell_members(grid: &HyperGrid) -> Vec<bool> {
    let d = grid.dim();
    if d == 0 || grid.len() <= 1 {
        return vec![false; grid.len()];
    }
    match grid.strategy {
        Strategy::CcdLite => {
            let r: Vec<f64> = grid.z.iter().map(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            let r_max = r.iter().copied().fold(0.0, f64::max);
            r.iter().map(|&v| v >= r_max - 1e-9 && v > 0.0).collect()
        }
        Strategy::AxisGrid => {
            let lo: Vec<f64> = (0..d).map(|j| grid.z.iter().map(|z| z[j]).fold(f64::INFINITY, f64::min)).collect();
            let hi: Vec<f64> = (0..d).map(|j| grid.z.iter().map(|z| z[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
            grid.z
                .iter()
                .map(|z| (0..d).any(|j| (z[j] - lo[j]).abs() < 1e-12 || (z[j] - hi[j]).abs() < 1e-12))
                .collect()
        }
    }
}

fn boundary_mass(grid: &HyperGrid) -> f64 {
    let w = grid.normalized_weights();
    shell_members(grid).iter().zip(&w).filter(|(s, _)| **s).map(|(_, w)| w).sum::<f64>().clamp(0.0, 1.0)
}

fn mode_shift(grid: &HyperGrid, initial_mode: usize) -> f64 {
    let cur = grid.argmax();
    grid.z[initial_mode].iter().zip(&grid.z[cur]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Fits the first partition and fixes the support points.
pub fn init_recursion(model: &ModelAssembly, partition1: Vec<ObservationBlock>, config: &RecursiveConfig) -> Result<RecursiveState> {
    if partition1.iter().all(|b| b.is_empty()) {
        return Err(LgmError::InvalidInput("first partition has no observations".into()));
    }
    let started = Instant::now();
    let m1 = model.with_observations(partition1)?;
    // Factors are dropped as soon as each support point is evaluated.
    let (grid, kept) = explore_hyperparameters_with(&m1, &config.engine, |a| (a.iterations, a.converged, a.as_prior()))?;
    let k = grid.len();
    let record = StepRecord {
        step: 1,
        n_observations: m1.n_observations(),
        cond_log_ml: grid.log_density.clone(),
        iterations: kept.iter().map(|t| t.0).collect(),
        converged: kept.iter().map(|t| t.1).collect(),
        failed: vec![false; k],
        mode_shift: 0.0,
        boundary_mass: boundary_mass(&grid),
    };
    Ok(RecursiveState {
        base: model.with_observations(Vec::new())?,
        config: *config,
        history: vec![grid.log_density.clone()],
        flagged: record.converged.iter().map(|c| !c).collect(),
        priors: kept.into_iter().map(|t| t.2).collect(),
        failed: vec![false; k],
        records: vec![record],
        grid,
        step: 1,
        started,
    })
}

impl RecursiveState {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn model(&self) -> &ModelAssembly {
        &self.base
    }

    /// Initial log density plus the sum of later history rows.
    pub fn accumulated(&self) -> Vec<f64> {
        let mut acc = self.history[0].clone();
        for row in &self.history[1..] {
            for (a, r) in acc.iter_mut().zip(row) {
                *a += r;
            }
        }
        acc
    }

    /// Absorbs one partition: per-point update of the latent posterior and the log density.
    pub fn step(mut self, partition: Vec<ObservationBlock>) -> Result<Self> {
        let k = self.len();
        let n_obs: usize = partition.iter().map(|b| b.len()).sum();
        self.step += 1;
        if n_obs == 0 {
            self.history.push(vec![0.0; k]);
            let record = StepRecord {
                step: self.step,
                n_observations: 0,
                cond_log_ml: vec![0.0; k],
                iterations: vec![0; k],
                converged: vec![true; k],
                failed: vec![false; k],
                mode_shift: mode_shift(&self.grid, self.grid.mode_index),
                boundary_mass: boundary_mass(&self.grid),
            };
            self.records.push(record);
            return Ok(self);
        }
        let model = self.base.with_observations(partition)?;
        let cfg = &self.config.engine;
        // Each slot is replaced as soon as its point converges, so old and new beliefs never coexist in full.
        let slots: Vec<Mutex<LatentPrior>> = std::mem::take(&mut self.priors).into_iter().map(Mutex::new).collect();
        let results = cfg.exec.map(k, |i| {
            if self.failed[i] {
                return None;
            }
            let theta = model.hyper().values(&self.grid.points[i]).ok()?;
            let mut slot = slots[i].lock().expect("prior slot poisoned");
            let a = approximate_with_prior(&model, &theta, &slot, &cfg.newton).ok()?;
            let c = a.laplace_log_marginal();
            if a.converged && c.is_finite() {
                *slot = a.as_prior();
            }
            Some((c, a.iterations, a.converged))
        });
        self.priors = slots.into_iter().map(|m| m.into_inner().expect("prior slot poisoned")).collect();
        let mut row = vec![0.0; k];
        let mut iterations = vec![0; k];
        let mut converged = vec![true; k];
        let mut failed = vec![false; k];
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Some((c, it, conv)) if c.is_finite() => {
                    row[i] = c;
                    iterations[i] = it;
                    converged[i] = conv;
                    if !conv {
                        log::warn!("support point {i} did not converge at step {}", self.step);
                        self.flagged[i] = true;
                    }
                }
                _ => {
                    row[i] = f64::NEG_INFINITY;
                    failed[i] = true;
                    if !self.failed[i] {
                        log::warn!("support point {i} failed at step {}", self.step);
                    }
                    self.failed[i] = true;
                    self.flagged[i] = true;
                }
            }
        }
        if self.failed.iter().all(|f| *f) {
            return Err(LgmError::Factorization { jitter: 0.0, reason: format!("every support point failed at step {}", self.step) });
        }
        for (ld, r) in self.grid.log_density.iter_mut().zip(&row) {
            *ld += r;
        }
        self.history.push(row.clone());
        let record = StepRecord {
            step: self.step,
            n_observations: n_obs,
            cond_log_ml: row,
            iterations,
            converged,
            failed,
            mode_shift: mode_shift(&self.grid, self.grid.mode_index),
            boundary_mass: boundary_mass(&self.grid),
        };
        self.records.push(record);
        Ok(self)
    }

    /// Posterior summary from the accumulated densities, the original weights and the current per-point posteriors.
    pub fn finalize(&self) -> Result<PosteriorSummary> {
        let cfg = &self.config.engine;
        let mut grid = self.grid.clone();
        grid.mode_index = grid.argmax();
        let vars = cfg.exec.try_map(self.len(), |i| {
            if self.failed[i] {
                return Ok(vec![0.0; self.base.n_latent()]);
            }
            belief_variances(&self.base, &self.priors[i], &cfg.newton.jitter)
        })?;
        let means: Vec<&[f64]> = self.priors.iter().map(|p| p.mean.as_slice()).collect();
        let iterations: Vec<usize> = self.records.iter().last().map_or(Vec::new(), |r| r.iterations.clone());
        let mut s = summarize_with_variances("recursive", &grid, &means, &vars, &iterations, cfg, self.started);
        let diag = self.mode_shift_diagnostic();
        if diag.flagged {
            s.warnings.push(format!(
                "boundary mass rose from {:.3} to {:.3}; the fixed support points may not cover the posterior",
                diag.initial_boundary_mass, diag.boundary_mass_fraction
            ));
        }
        let n_flagged = self.flagged.iter().filter(|f| **f).count();
        if n_flagged > 0 {
            s.warnings.push(format!("{n_flagged} support points flagged during the recursion"));
        }
        Ok(s)
    }

    pub fn mode_shift_diagnostic(&self) -> DriftDiagnostics {
        let shifts: Vec<f64> = self.records.iter().map(|r| r.mode_shift).collect();
        let masses: Vec<f64> = self.records.iter().map(|r| r.boundary_mass).collect();
        let initial = masses[0];
        let current = *masses.last().unwrap();
        DriftDiagnostics {
            per_step_mode_shift: shifts,
            per_step_boundary_mass: masses,
            boundary_mass_fraction: current,
            initial_boundary_mass: initial,
            flagged: current - initial > self.config.boundary_threshold,
        }
    }

    /// One row per (step, support point).
    pub fn trace_csv(&self) -> String {
        let mut out = String::from(
            "step,point,n_observations,cond_log_ml,accumulated_log_density,newton_iterations,converged,failed,mode_shift,boundary_mass\n",
        );
        let mut acc = vec![0.0; self.len()];
        for (rec, row) in self.records.iter().zip(&self.history) {
            for i in 0..self.len() {
                acc[i] += row[i];
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    rec.step,
                    i,
                    rec.n_observations,
                    rec.cond_log_ml[i],
                    acc[i],
                    rec.iterations[i],
                    rec.converged[i],
                    rec.failed[i],
                    rec.mode_shift,
                    rec.boundary_mass
                );
            }
        }
        out
    }

    pub fn write_trace(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(TRACE_FILE), self.trace_csv())?;
        Ok(())
    }
}

/// Runs the whole recursion over the given partitions.
pub fn fit_recursive(model: &ModelAssembly, partitions: Vec<Vec<ObservationBlock>>, config: &RecursiveConfig) -> Result<(PosteriorSummary, RecursiveState)> {
    let mut parts = partitions.into_iter();
    let first = parts.next().ok_or_else(|| LgmError::InvalidInput("no partitions".into()))?;
    let mut state = init_recursion(model, first, config)?;
    for p in parts {
        state = state.step(p)?;
    }
    Ok((state.finalize()?, state))
}
