//! Gaussian approximation of the latent conditional by Newton iteration.

use serde::{Deserialize, Serialize};

use crate::error::{LgmError, Result};
use crate::gmrf::cholesky::{CholeskyFactor, JitterPolicy};
use crate::gmrf::constraint::{log_density_at_mode, ConstraintCorrection};
use crate::gmrf::{SparseRows, SparseSymmetric, TripletBuilder};
use crate::hyper::HyperValues;
use crate::likelihood::{grad_hess_eta, loglik};
use crate::model::{LatentPrior, ModelAssembly};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Convergence when the max-norm of an accepted step is at most this.
    pub tol: f64,
    pub max_halvings: usize,
    pub jitter: JitterPolicy,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { max_iter: 50, tol: 1e-8, max_halvings: 30, jitter: JitterPolicy::default() }
    }
}

/// Gaussian approximation `N(mode, precision⁻¹)` (conditioned on the model's constraints).
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub mode: Vec<f64>,
    pub precision: SparseSymmetric,
    pub factor: CholeskyFactor,
    pub correction: Option<ConstraintCorrection>,
    /// Log-density of this Gaussian at its own mode.
    pub log_gauss_at_mode: f64,
    pub loglik_at_mode: f64,
    /// Log-density of the latent prior at the mode.
    pub log_prior_at_mode: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective `log ℓ + log prior` after each accepted iterate.
    pub objective_trace: Vec<f64>,
}

impl GaussianApprox {
    pub fn dim(&self) -> usize {
        self.mode.len()
    }

    /// Marginal variances of the (constrained) approximation.
    pub fn marginal_variances(&self) -> Vec<f64> {
        let mut v = self.factor.marginal_variances();
        if let Some(c) = &self.correction {
            for (vi, r) in v.iter_mut().zip(c.variance_reduction()) {
                *vi = (*vi - r).max(0.0);
            }
        }
        v
    }

    /// `log ℓ(y|x*) + log π(x*) − log π_G(x*)`.
    pub fn laplace_log_marginal(&self) -> f64 {
        self.loglik_at_mode + self.log_prior_at_mode - self.log_gauss_at_mode
    }

    /// This approximation as a latent prior for a later update.
    pub fn as_prior(&self) -> LatentPrior {
        LatentPrior {
            mean: self.mode.clone(),
            precision: self.precision.clone(),
            log_det: self.factor.log_det(),
            constraint_log_norm: self.correction.as_ref().map_or(0.0, |c| c.log_density_of_constraint(&self.mode)),
        }
    }
}

struct Problem<'a> {
    model: &'a ModelAssembly,
    theta: HyperValues,
    designs: Vec<SparseRows>,
    prior: &'a LatentPrior,
    qm: Vec<f64>,
}

impl Problem<'_> {
    fn loglik(&self, x: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for ob in self.model.observations() {
            let eta = ob.eta(x, &self.theta)?;
            total += loglik(ob, &eta, &self.theta)?;
        }
        Ok(total)
    }

    fn objective(&self, x: &[f64]) -> Result<f64> {
        Ok(self.loglik(x)? + self.prior.log_density(x))
    }

    /// Posterior precision and Newton right-hand side at `x`.
    fn system(&self, x: &[f64]) -> Result<(SparseSymmetric, Vec<f64>)> {
        let n = self.model.n_latent();
        let q = &self.prior.precision;
        let extra: usize = self
            .designs
            .iter()
            .map(|d| (0..d.nrows()).map(|r| d.row_cols(r).len().pow(2)).sum::<usize>())
            .sum();
        let mut t = TripletBuilder::with_capacity(n, q.nnz() + extra);
        t.add_block(0, q);
        let mut b = self.qm.clone();
        for (ob, design) in self.model.observations().iter().zip(&self.designs) {
            let eta = ob.eta(x, &self.theta)?;
            let (g, c) = grad_hess_eta(ob, &eta, &self.theta)?;
            let ax = design.mul_vec(x);
            for r in 0..design.nrows() {
                let cols = design.row_cols(r);
                let vals = design.row_values(r);
                let w = g[r] + c[r] * ax[r];
                for (a, (&ca, &va)) in cols.iter().zip(vals).enumerate() {
                    b[ca] += va * w;
                    for (&cb, &vb) in cols[..=a].iter().zip(&vals[..=a]) {
                        t.add(ca, cb, c[r] * va * vb);
                    }
                }
            }
        }
        Ok((t.build()?, b))
    }

    fn factorize(&self, h: &SparseSymmetric, opts: &NewtonOptions) -> Result<CholeskyFactor> {
        let sym = self.model.symbolic_cache().get(h)?;
        CholeskyFactor::factorize(&sym, h, &opts.jitter)
    }

    fn solve_step(&self, h: &SparseSymmetric, b: &[f64], opts: &NewtonOptions) -> Result<(Vec<f64>, CholeskyFactor, Option<ConstraintCorrection>)> {
        let f = self.factorize(h, opts)?;
        let mut x = f.solve(b)?;
        let corr = ConstraintCorrection::new(&f, self.model.constraints())?;
        if let Some(c) = &corr {
            x = c.correct(&x);
        }
        Ok((x, f, corr))
    }
}

/// Newton approximation of `π(x | y, θ)` at internal hyperparameters `theta_free`.
///
/// With `latent_prior` the previous approximation replaces the model's latent prior.
pub fn gaussian_approximation(
    model: &ModelAssembly,
    theta_free: &[f64],
    latent_prior: Option<&GaussianApprox>,
    opts: &NewtonOptions,
) -> Result<GaussianApprox> {
    let theta = model.hyper().values(theta_free)?;
    let prior = match latent_prior {
        Some(a) => {
            if a.dim() != model.n_latent() {
                return Err(LgmError::DimensionMismatch { context: "latent prior", expected: model.n_latent(), found: a.dim() });
            }
            a.as_prior()
        }
        None => model.prior_at(&theta)?,
    };
    approximate_with_prior(model, &theta, &prior, opts)
}

/// Newton approximation with an explicit latent prior.
pub fn approximate_with_prior(
    model: &ModelAssembly,
    theta: &HyperValues,
    prior: &LatentPrior,
    opts: &NewtonOptions,
) -> Result<GaussianApprox> {
    let designs = model
        .observations()
        .iter()
        .map(|o| o.effective_design(theta))
        .collect::<Result<Vec<_>>>()?;
    let p = Problem { model, theta: theta.clone(), designs, prior, qm: prior.precision.matvec(&prior.mean) };
    let n = model.n_latent();
    let mut x = prior.mean.clone();

    if model.is_gaussian() {
        let (h, b) = p.system(&x)?;
        let (x, factor, correction) = p.solve_step(&h, &b, opts)?;
        return finish(&p, x, h, factor, correction, 1, true, Vec::new());
    }

    let mut trace = Vec::new();
    let mut f_old = if model.constraints().max_violation(&x) > 1e-10 { f64::NEG_INFINITY } else { p.objective(&x)? };
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let (h, b) = p.system(&x)?;
        let (target, _, _) = p.solve_step(&h, &b, opts)?;
        let step: Vec<f64> = target.iter().zip(&x).map(|(t, xi)| t - xi).collect();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = (0..n).map(|i| x[i] + t * step[i]).collect();
            if let Ok(f) = p.objective(&trial) {
                if f.is_finite() && f >= f_old - 1e-12 * f_old.abs().max(1.0) {
                    accepted = Some((trial, f));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, f)) = accepted else {
            break;
        };
        let moved = step.iter().fold(0.0f64, |m, s| m.max((t * s).abs()));
        x = xn;
        f_old = f;
        trace.push(f);
        if moved <= opts.tol {
            converged = true;
            break;
        }
    }
    let (h, _) = p.system(&x)?;
    let factor = p.factorize(&h, opts)?;
    let correction = ConstraintCorrection::new(&factor, model.constraints())?;
    if !converged {
        log::warn!("Newton iteration did not converge after {iterations} iterations");
    }
    finish(&p, x, h, factor, correction, iterations, converged, trace)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    p: &Problem<'_>,
    mode: Vec<f64>,
    precision: SparseSymmetric,
    factor: CholeskyFactor,
    correction: Option<ConstraintCorrection>,
    iterations: usize,
    converged: bool,
    mut objective_trace: Vec<f64>,
) -> Result<GaussianApprox> {
    let loglik_at_mode = p.loglik(&mode)?;
    let log_prior_at_mode = p.prior.log_density(&mode);
    if objective_trace.is_empty() {
        objective_trace.push(loglik_at_mode + log_prior_at_mode);
    }
    let log_gauss_at_mode = log_density_at_mode(mode.len(), factor.log_det(), correction.as_ref());
    if !(loglik_at_mode.is_finite() && log_prior_at_mode.is_finite() && log_gauss_at_mode.is_finite()) {
        return Err(LgmError::NonFinite("Laplace terms"));
    }
    Ok(GaussianApprox {
        mode,
        precision,
        factor,
        correction,
        log_gauss_at_mode,
        loglik_at_mode,
        log_prior_at_mode,
        iterations,
        converged,
        objective_trace,
    })
}

/// Marginal variances of a Gaussian belief under the model's constraints.
pub fn belief_variances(model: &ModelAssembly, belief: &LatentPrior, jitter: &JitterPolicy) -> Result<Vec<f64>> {
    let sym = model.symbolic_cache().get(&belief.precision)?;
    let factor = CholeskyFactor::factorize(&sym, &belief.precision, jitter)?;
    let mut v = factor.marginal_variances();
    if let Some(c) = ConstraintCorrection::new(&factor, model.constraints())? {
        for (vi, r) in v.iter_mut().zip(c.variance_reduction()) {
            *vi = (*vi - r).max(0.0);
        }
    }
    Ok(v)
}

/// `log π̃(θ | y)` up to a constant, with the approximation used to compute it.
pub fn log_hyper_posterior(
    model: &ModelAssembly,
    theta_free: &[f64],
    latent_prior: Option<&GaussianApprox>,
    opts: &NewtonOptions,
) -> Result<(f64, GaussianApprox)> {
    let a = gaussian_approximation(model, theta_free, latent_prior, opts)?;
    Ok((a.laplace_log_marginal() + model.hyper().log_prior(theta_free), a))
}
