//! Reference computations by dense algebra and brute-force quadrature.

use lgm_core::hyper::HyperValues;
use lgm_core::likelihood::{loglik, ObservationBlock};
use lgm_core::model::ModelAssembly;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, HarnessError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub struct ConjugatePosterior {
    pub mean: Vec<f64>,
    /// Posterior precision before any linear constraint is imposed.
    pub precision: DMatrix<f64>,
    /// Posterior covariance after conditioning on the constraints.
    pub covariance: DMatrix<f64>,
    pub log_evidence: f64,
}

impl ConjugatePosterior {
    pub fn sds(&self) -> Vec<f64> {
        (0..self.mean.len()).map(|i| self.covariance[(i, i)].max(0.0).sqrt()).collect()
    }
}

fn numerical(what: &str) -> HarnessError {
    HarnessError::Numerical(format!("{what} is not positive definite"))
}

/// Dense data precisions `ψ φ_i` of a Gaussian block.
fn noise_precisions(block: &ObservationBlock, theta: &HyperValues) -> Result<Vec<f64>> {
    let psi = theta.get(&block.likelihood.hyper_bindings[0])?;
    Ok((0..block.len()).map(|i| psi * block.precision_scales.as_ref().map_or(1.0, |p| p[i])).collect())
}

/// Conditions `N(m, S)` on `A x = e`.
fn condition(m: &DVector<f64>, s: &DMatrix<f64>, a: &DMatrix<f64>, e: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if a.nrows() == 0 {
        return Ok((m.clone(), s.clone()));
    }
    let sat = s * a.transpose();
    let k = (a * &sat).cholesky().ok_or_else(|| numerical("constraint covariance"))?;
    let gain = k.solve(&sat.transpose()).transpose();
    let m = m - &gain * (a * m - e);
    let mut s = s - &gain * sat.transpose();
    s = (&s + s.transpose()) * 0.5;
    Ok((m, s))
}

/// Exact posterior and evidence of a fully Gaussian model at fixed hyperparameters.
pub fn conjugate_gaussian(model: &ModelAssembly, theta: &HyperValues) -> Result<ConjugatePosterior> {
    if !model.is_gaussian() {
        return invalid("conjugate oracle needs Gaussian likelihoods only");
    }
    let n = model.n_latent();
    let prior = model.prior_at(theta)?;
    let q = prior.precision.to_dense();
    let mu = DVector::from_vec(prior.mean.clone());
    let sigma = q.clone().cholesky().ok_or_else(|| numerical("prior precision"))?.inverse();
    let c = model.constraints();
    let a = DMatrix::from_fn(c.len(), n, |i, j| c.rows()[i][j]);
    let e = DVector::from_column_slice(c.rhs());
    let (mu_c, sigma_c) = condition(&mu, &sigma, &a, &e)?;

    let m: usize = model.observations().iter().map(|o| o.len()).sum();
    let mut h = DMatrix::zeros(m, n);
    let mut y = DVector::zeros(m);
    let mut d = Vec::with_capacity(m);
    let mut row = 0;
    for o in model.observations() {
        let design = o.effective_design(theta)?.to_dense();
        h.view_mut((row, 0), (o.len(), n)).copy_from(&design);
        for i in 0..o.len() {
            y[row + i] = o.values[i] - o.offset.as_ref().map_or(0.0, |f| f[i]);
        }
        d.extend(noise_precisions(o, theta)?);
        row += o.len();
    }
    let d = DVector::from_vec(d);

    let hd = h.transpose() * DMatrix::from_diagonal(&d);
    let precision = &q + &hd * &h;
    let b = &q * &mu + &hd * &y;
    let post = precision.clone().cholesky().ok_or_else(|| numerical("posterior precision"))?;
    let (mean, covariance) = condition(&post.solve(&b), &post.inverse(), &a, &e)?;

    let log_evidence = if m == 0 {
        0.0
    } else {
        let mut cov = &h * &sigma_c * h.transpose();
        for i in 0..m {
            cov[(i, i)] += 1.0 / d[i];
        }
        let r = &y - &h * &mu_c;
        let ch = cov.cholesky().ok_or_else(|| numerical("marginal data covariance"))?;
        let log_det: f64 = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (m as f64 * LN_2PI + log_det + r.dot(&ch.solve(&r)))
    };
    Ok(ConjugatePosterior { mean: mean.as_slice().to_vec(), precision, covariance, log_evidence })
}

/// Posterior quantities from joint trapezoid quadrature over one latent node and at most one
/// free hyperparameter.
#[derive(Debug, Clone, Serialize)]
pub struct Quadrature {
    /// Internal-scale hyperparameter grid (empty without a free hyperparameter).
    pub us: Vec<f64>,
    /// Normalized log-density of the hyperparameter on `us`.
    pub log_post_u: Vec<f64>,
    /// Unnormalized `log π(u, y)` on `us`.
    pub log_joint_u: Vec<f64>,
    pub u_mode: Option<f64>,
    pub xs: Vec<f64>,
    pub x_density: Vec<f64>,
    pub x_mean: f64,
    pub x_sd: f64,
    pub log_evidence: f64,
}

fn trapezoid_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let left = if i > 0 { x[i] - x[i - 1] } else { 0.0 };
            let right = if i + 1 < n { x[i + 1] - x[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// `log Σ w_i exp(f_i)`.
fn log_weighted_sum(w: &[f64], f: &[f64]) -> f64 {
    let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + w.iter().zip(f).map(|(w, f)| w * (f - max).exp()).sum::<f64>().ln()
}

/// Refines a grid argmax by a parabola through its neighbours.
fn refined_argmax(x: &[f64], f: &[f64]) -> f64 {
    let k = (0..f.len()).fold(0, |b, i| if f[i] > f[b] { i } else { b });
    if k == 0 || k + 1 == f.len() {
        return x[k];
    }
    let (x0, x1, x2) = (x[k - 1], x[k], x[k + 1]);
    let (f0, f1, f2) = (f[k - 1], f[k], f[k + 1]);
    let num = (x1 - x0).powi(2) * (f1 - f2) - (x1 - x2).powi(2) * (f1 - f0);
    let den = (x1 - x0) * (f1 - f2) - (x1 - x2) * (f1 - f0);
    if den.abs() < 1e-300 {
        x1
    } else {
        x1 - 0.5 * num / den
    }
}

pub fn quadrature_1d(model: &ModelAssembly, us: &[f64], xs: &[f64]) -> Result<Quadrature> {
    let d = model.hyper().n_free();
    if model.n_latent() != 1 || d > 1 {
        return invalid(format!("quadrature oracle handles one latent node and at most one free hyperparameter, got {} and {d}", model.n_latent()));
    }
    if xs.len() < 3 || (d == 1 && us.len() < 3) {
        return invalid("quadrature grids need at least three points");
    }
    let points: Vec<Vec<f64>> = if d == 0 { vec![vec![]] } else { us.iter().map(|&u| vec![u]).collect() };
    let wx = trapezoid_weights(xs);
    let mut log_joint_u = Vec::with_capacity(points.len());
    let mut cond_x: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    for p in &points {
        let theta = model.hyper().values(p)?;
        let prior = model.prior_at(&theta)?;
        let (m, q) = (prior.mean[0], prior.precision.get(0, 0));
        let mut f = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut lp = 0.5 * (q.ln() - LN_2PI) - 0.5 * q * (x - m).powi(2);
            for o in model.observations() {
                lp += loglik(o, &o.eta(&[x], &theta)?, &theta).unwrap_or(f64::NEG_INFINITY);
            }
            f.push(lp);
        }
        log_joint_u.push(log_weighted_sum(&wx, &f) + model.hyper().log_prior(p));
        cond_x.push(f);
    }
    let (log_evidence, log_post_u, u_mode) = if d == 0 {
        (log_joint_u[0], vec![], None)
    } else {
        let wu = trapezoid_weights(us);
        let z = log_weighted_sum(&wu, &log_joint_u);
        (z, log_joint_u.iter().map(|v| v - z).collect(), Some(refined_argmax(us, &log_joint_u)))
    };
    // π(x | y) = Σ_u w_u π(u, x, y) / π(y)
    let wu = if d == 0 { vec![1.0] } else { trapezoid_weights(us) };
    let mut x_density = vec![0.0; xs.len()];
    for (k, f) in cond_x.iter().enumerate() {
        let lp = if d == 0 { 0.0 } else { model.hyper().log_prior(&points[k]) };
        for (i, v) in f.iter().enumerate() {
            x_density[i] += wu[k] * (v + lp - log_evidence).exp();
        }
    }
    let mass: f64 = wx.iter().zip(&x_density).map(|(w, p)| w * p).sum();
    let x_mean = wx.iter().zip(&x_density).zip(xs).map(|((w, p), x)| w * p * x).sum::<f64>() / mass;
    let x_var = wx.iter().zip(&x_density).zip(xs).map(|((w, p), x)| w * p * (x - x_mean).powi(2)).sum::<f64>() / mass;
    Ok(Quadrature {
        us: us.to_vec(),
        log_post_u,
        log_joint_u: if d == 0 { vec![] } else { log_joint_u },
        u_mode,
        xs: xs.to_vec(),
        x_density,
        x_mean,
        x_sd: x_var.sqrt(),
        log_evidence,
    })
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Whether a model is within reach of [`quadrature_1d`].
pub fn quadrature_applies(model: &ModelAssembly) -> bool {
    model.n_latent() == 1 && model.hyper().n_free() <= 1
}
