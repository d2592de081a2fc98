//! Observation models and their derivatives with respect to the linear predictor.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, LgmError, Result};
use crate::gmrf::SparseRows;
use crate::hyper::HyperValues;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Lower bound on the negative curvature so Newton steps stay defined.
pub const CURVATURE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Poisson,
    Bernoulli,
    Binomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Log,
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodSpec {
    pub family: Family,
    pub link: Link,
    /// Gaussian only: the precision hyperparameter (τ, or ψ when precision scales are given).
    #[serde(default)]
    pub hyper_bindings: Vec<String>,
    /// Binomial only.
    #[serde(default)]
    pub trials: Option<Vec<u32>>,
}

impl LikelihoodSpec {
    pub fn gaussian(precision: impl Into<String>) -> Self {
        Self { family: Family::Gaussian, link: Link::Identity, hyper_bindings: vec![precision.into()], trials: None }
    }

    pub fn poisson() -> Self {
        Self { family: Family::Poisson, link: Link::Log, hyper_bindings: Vec::new(), trials: None }
    }

    pub fn bernoulli() -> Self {
        Self { family: Family::Bernoulli, link: Link::Logit, hyper_bindings: Vec::new(), trials: None }
    }

    pub fn binomial(trials: Vec<u32>) -> Self {
        Self { family: Family::Binomial, link: Link::Logit, hyper_bindings: Vec::new(), trials: Some(trials) }
    }

    fn validate(&self) -> Result<()> {
        let ok = matches!(
            (self.family, self.link),
            (Family::Gaussian, Link::Identity)
                | (Family::Poisson, Link::Log)
                | (Family::Bernoulli, Link::Logit)
                | (Family::Binomial, Link::Logit)
        );
        if !ok {
            return invalid(format!("unsupported family/link pair {:?}/{:?}", self.family, self.link));
        }
        let want = usize::from(self.family == Family::Gaussian);
        if self.hyper_bindings.len() != want {
            return invalid(format!("{:?} likelihood takes {want} hyperparameter binding(s)", self.family));
        }
        if self.trials.is_some() != (self.family == Family::Binomial) {
            return invalid("trials are required for, and only for, the binomial family");
        }
        Ok(())
    }
}

/// A set of observations sharing one likelihood.
///
/// The linear predictor is `offset + A x + α B x`, where `B` is the optional
/// scaled design and α a hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationBlock {
    pub values: Vec<f64>,
    pub design: SparseRows,
    #[serde(default)]
    pub scaled_design: Option<ScaledDesign>,
    #[serde(default)]
    pub offset: Option<Vec<f64>>,
    #[serde(default)]
    pub precision_scales: Option<Vec<f64>>,
    pub likelihood: LikelihoodSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledDesign {
    pub alpha: String,
    pub design: SparseRows,
}

impl ObservationBlock {
    pub fn new(values: Vec<f64>, design: SparseRows, likelihood: LikelihoodSpec) -> Result<Self> {
        let b = Self { values, design, scaled_design: None, offset: None, precision_scales: None, likelihood };
        b.validate()?;
        Ok(b)
    }

    pub fn with_precision_scales(mut self, phi: Vec<f64>) -> Result<Self> {
        self.precision_scales = Some(phi);
        self.validate()?;
        Ok(self)
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Result<Self> {
        self.offset = Some(offset);
        self.validate()?;
        Ok(self)
    }

    pub fn with_scaled_design(mut self, alpha: impl Into<String>, design: SparseRows) -> Result<Self> {
        self.scaled_design = Some(ScaledDesign { alpha: alpha.into(), design });
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ncols(&self) -> usize {
        self.design.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        self.likelihood.validate()?;
        let n = self.values.len();
        if self.design.nrows() != n {
            return Err(LgmError::DimensionMismatch { context: "design rows", expected: n, found: self.design.nrows() });
        }
        if let Some(s) = &self.scaled_design {
            if s.design.nrows() != n || s.design.ncols() != self.design.ncols() {
                return invalid("scaled design must have the same shape as the design");
            }
        }
        if let Some(o) = &self.offset {
            if o.len() != n {
                return Err(LgmError::DimensionMismatch { context: "offset", expected: n, found: o.len() });
            }
            if o.iter().any(|v| !v.is_finite()) {
                return Err(LgmError::NonFinite("offset"));
            }
        }
        if let Some(phi) = &self.precision_scales {
            if self.likelihood.family != Family::Gaussian {
                return invalid("precision scales apply to gaussian blocks only");
            }
            if phi.len() != n {
                return Err(LgmError::DimensionMismatch { context: "precision scales", expected: n, found: phi.len() });
            }
            if phi.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
                return invalid("precision scales must be strictly positive");
            }
        }
        let integral = |y: f64| y >= 0.0 && y.fract() == 0.0;
        for (i, &y) in self.values.iter().enumerate() {
            let ok = match self.likelihood.family {
                Family::Gaussian => y.is_finite(),
                Family::Poisson => integral(y),
                Family::Bernoulli => y == 0.0 || y == 1.0,
                Family::Binomial => {
                    let trials = self.likelihood.trials.as_ref().unwrap();
                    trials.len() == n && integral(y) && y <= trials[i] as f64
                }
            };
            if !ok {
                return invalid(format!("observation {i} ({y}) is invalid for the {:?} family", self.likelihood.family));
            }
        }
        Ok(())
    }

    /// Rows `rows` of this block, as a new block.
    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |v: &Vec<f64>| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        let mut likelihood = self.likelihood.clone();
        if let Some(t) = &self.likelihood.trials {
            likelihood.trials = Some(rows.iter().map(|&r| t[r]).collect());
        }
        Self {
            values: pick(&self.values),
            design: self.design.select_rows(rows),
            scaled_design: self
                .scaled_design
                .as_ref()
                .map(|s| ScaledDesign { alpha: s.alpha.clone(), design: s.design.select_rows(rows) }),
            offset: self.offset.as_ref().map(pick),
            precision_scales: self.precision_scales.as_ref().map(pick),
            likelihood,
        }
    }

    /// Effective design `A + α B` for the given hyperparameters.
    pub fn effective_design(&self, theta: &HyperValues) -> Result<SparseRows> {
        match &self.scaled_design {
            None => Ok(self.design.clone()),
            Some(s) => {
                let alpha = theta.get(&s.alpha)?;
                self.design.add(&s.design.scaled(alpha))
            }
        }
    }

    /// Linear predictor for latent vector `x`.
    pub fn eta(&self, x: &[f64], theta: &HyperValues) -> Result<Vec<f64>> {
        let mut eta = self.design.mul_vec(x);
        if let Some(s) = &self.scaled_design {
            let alpha = theta.get(&s.alpha)?;
            for (e, v) in eta.iter_mut().zip(s.design.mul_vec(x)) {
                *e += alpha * v;
            }
        }
        if let Some(o) = &self.offset {
            for (e, v) in eta.iter_mut().zip(o) {
                *e += v;
            }
        }
        Ok(eta)
    }

    /// Per-observation Gaussian precisions (empty for other families).
    fn gaussian_precisions(&self, theta: &HyperValues) -> Result<Vec<f64>> {
        if self.likelihood.family != Family::Gaussian {
            return Ok(Vec::new());
        }
        let psi = theta.get(&self.likelihood.hyper_bindings[0])?;
        match &self.precision_scales {
            Some(phi) => expert_precision(psi, phi),
            None => Ok(vec![psi; self.values.len()]),
        }
    }

    fn check_eta(&self, eta: &[f64]) -> Result<()> {
        if eta.len() != self.values.len() {
            return Err(LgmError::DimensionMismatch { context: "linear predictor", expected: self.values.len(), found: eta.len() });
        }
        if eta.iter().any(|e| !e.is_finite()) {
            return Err(LgmError::NonFinite("linear predictor"));
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn ln_choose(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

/// `Σ_i log p(y_i | η_i, θ)` for one block.
pub fn loglik(block: &ObservationBlock, eta: &[f64], theta: &HyperValues) -> Result<f64> {
    block.check_eta(eta)?;
    let y = &block.values;
    let total: f64 = match block.likelihood.family {
        Family::Gaussian => {
            let tau = block.gaussian_precisions(theta)?;
            (0..y.len())
                .map(|i| {
                    let r = y[i] - eta[i];
                    0.5 * tau[i].ln() - 0.5 * LN_2PI - 0.5 * tau[i] * r * r
                })
                .sum()
        }
        Family::Poisson => (0..y.len()).map(|i| y[i] * eta[i] - eta[i].exp() - ln_gamma(y[i] + 1.0)).sum(),
        Family::Bernoulli => (0..y.len()).map(|i| y[i] * eta[i] - softplus(eta[i])).sum(),
        Family::Binomial => {
            let trials = block.likelihood.trials.as_ref().unwrap();
            (0..y.len())
                .map(|i| {
                    let n = trials[i] as f64;
                    ln_choose(n, y[i]) + y[i] * eta[i] - n * softplus(eta[i])
                })
                .sum()
        }
    };
    if total.is_finite() {
        Ok(total)
    } else {
        Err(LgmError::NonFinite("log-likelihood"))
    }
}

/// Gradient and negative curvature of the log-likelihood with respect to each `η_i`.
pub fn grad_hess_eta(block: &ObservationBlock, eta: &[f64], theta: &HyperValues) -> Result<(Vec<f64>, Vec<f64>)> {
    block.check_eta(eta)?;
    let y = &block.values;
    let n = y.len();
    let mut g = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    match block.likelihood.family {
        Family::Gaussian => {
            let tau = block.gaussian_precisions(theta)?;
            for i in 0..n {
                g.push(tau[i] * (y[i] - eta[i]));
                c.push(tau[i]);
            }
        }
        Family::Poisson => {
            for i in 0..n {
                let mu = eta[i].exp();
                g.push(y[i] - mu);
                c.push(mu.max(CURVATURE_FLOOR));
            }
        }
        Family::Bernoulli => {
            for i in 0..n {
                let p = logistic(eta[i]);
                g.push(y[i] - p);
                c.push((p * (1.0 - p)).max(CURVATURE_FLOOR));
            }
        }
        Family::Binomial => {
            let trials = block.likelihood.trials.as_ref().unwrap();
            for i in 0..n {
                let p = logistic(eta[i]);
                let m = trials[i] as f64;
                g.push(y[i] - m * p);
                c.push((m * p * (1.0 - p)).max(CURVATURE_FLOOR));
            }
        }
    }
    Ok((g, c))
}

/// Per-observation expert precisions `ψ φ_i`.
pub fn expert_precision(psi: f64, phi: &[f64]) -> Result<Vec<f64>> {
    if !(psi > 0.0 && psi.is_finite()) {
        return invalid(format!("ψ must be positive, got {psi}"));
    }
    if phi.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
        return invalid("φ must be strictly positive");
    }
    Ok(phi.iter().map(|p| psi * p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(family: LikelihoodSpec, y: f64) -> ObservationBlock {
        ObservationBlock::new(vec![y], SparseRows::identity(1), family).unwrap()
    }

    fn tau(v: f64) -> HyperValues {
        HyperValues::from_pairs(&[("tau", v)])
    }

    #[test]
    fn analytic_values() {
        let g = one(LikelihoodSpec::gaussian("tau"), 0.3);
        assert!((loglik(&g, &[0.3], &tau(1.0)).unwrap() + 0.5 * LN_2PI).abs() < 1e-15);
        let p = one(LikelihoodSpec::poisson(), 0.0);
        assert!((loglik(&p, &[0.0], &tau(1.0)).unwrap() + 1.0).abs() < 1e-15);
        let b = one(LikelihoodSpec::bernoulli(), 1.0);
        assert!((loglik(&b, &[0.0], &tau(1.0)).unwrap() - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn analytic_derivatives() {
        let g = one(LikelihoodSpec::gaussian("tau"), 1.5);
        let (gr, c) = grad_hess_eta(&g, &[0.5], &tau(2.0)).unwrap();
        assert_eq!((gr[0], c[0]), (2.0, 2.0));
        let p = one(LikelihoodSpec::poisson(), 3.0);
        let (gr, c) = grad_hess_eta(&p, &[0.0], &tau(1.0)).unwrap();
        assert_eq!((gr[0], c[0]), (2.0, 1.0));
        let b = one(LikelihoodSpec::bernoulli(), 0.0);
        let (gr, c) = grad_hess_eta(&b, &[0.0], &tau(1.0)).unwrap();
        assert_eq!((gr[0], c[0]), (-0.5, 0.25));
    }

    #[test]
    fn validation() {
        assert!(ObservationBlock::new(vec![0.5], SparseRows::identity(1), LikelihoodSpec::bernoulli()).is_err());
        assert!(ObservationBlock::new(vec![-1.0], SparseRows::identity(1), LikelihoodSpec::poisson()).is_err());
        assert!(ObservationBlock::new(vec![4.0], SparseRows::identity(1), LikelihoodSpec::binomial(vec![3])).is_err());
        let bad = LikelihoodSpec { link: Link::Log, ..LikelihoodSpec::gaussian("tau") };
        assert!(ObservationBlock::new(vec![0.0], SparseRows::identity(1), bad).is_err());
        let p = one(LikelihoodSpec::poisson(), 1.0);
        assert!(p.clone().with_precision_scales(vec![1.0]).is_err());
        assert!(loglik(&p, &[f64::NAN], &tau(1.0)).is_err());
    }

    #[test]
    fn expert_scaling() {
        assert_eq!(expert_precision(1.0, &[2.0, 3.0]).unwrap(), vec![2.0, 3.0]);
        assert_eq!(expert_precision(0.5, &[2.0, 4.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(expert_precision(1e-6, &[1.0]).unwrap(), vec![1e-6]);
        assert!(expert_precision(0.0, &[1.0]).is_err());
        assert!(expert_precision(1.0, &[0.0]).is_err());
    }

    #[test]
    fn scaled_design_enters_predictor() {
        let b = ObservationBlock::new(vec![0.0], SparseRows::identity(1), LikelihoodSpec::gaussian("tau"))
            .unwrap()
            .with_scaled_design("alpha", SparseRows::identity(1))
            .unwrap();
        let th = HyperValues::from_pairs(&[("tau", 1.0), ("alpha", 2.0)]);
        assert_eq!(b.eta(&[1.5], &th).unwrap(), vec![4.5]);
    }
}
