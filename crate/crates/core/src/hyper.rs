//! Hyperparameter layout: names, internal transforms, priors and fixed values.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, LgmError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Map from the unconstrained internal scale to the natural scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Precisions and other positive quantities.
    Log,
    /// Correlations in (-1, 1).
    FisherZ,
    Identity,
}

impl Transform {
    pub fn to_natural(self, u: f64) -> f64 {
        match self {
            Transform::Log => u.exp(),
            Transform::FisherZ => u.tanh(),
            Transform::Identity => u,
        }
    }

    pub fn to_internal(self, v: f64) -> Result<f64> {
        match self {
            Transform::Log if v > 0.0 => Ok(v.ln()),
            Transform::FisherZ if v.abs() < 1.0 => Ok(v.atanh()),
            Transform::Identity if v.is_finite() => Ok(v),
            _ => invalid(format!("value {v} outside the domain of the {self:?} transform")),
        }
    }

    /// `log |d natural / d internal|` at internal value `u`.
    pub fn log_jacobian(self, u: f64) -> f64 {
        match self {
            Transform::Log => u,
            Transform::FisherZ => {
                let t = u.tanh();
                (1.0 - t * t).ln()
            }
            Transform::Identity => 0.0,
        }
    }
}

/// Prior density on the internal scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum HyperPrior {
    Normal { mean: f64, sd: f64 },
    /// Gamma(shape, rate) on the natural scale, expressed as a density of its logarithm.
    LogGamma { shape: f64, rate: f64 },
    /// Improper constant density.
    Flat,
}

impl HyperPrior {
    pub fn log_density(&self, u: f64) -> f64 {
        match *self {
            HyperPrior::Normal { mean, sd } => {
                let z = (u - mean) / sd;
                -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
            }
            HyperPrior::LogGamma { shape, rate } => shape * rate.ln() - ln_gamma(shape) + shape * u - rate * u.exp(),
            HyperPrior::Flat => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            HyperPrior::Normal { sd, mean } if sd > 0.0 && mean.is_finite() => Ok(()),
            HyperPrior::LogGamma { shape, rate } if shape > 0.0 && rate > 0.0 => Ok(()),
            HyperPrior::Flat => Ok(()),
            _ => invalid(format!("invalid prior parameters {self:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSpec {
    pub name: String,
    pub transform: Transform,
    pub prior: HyperPrior,
    /// Starting value on the internal scale.
    #[serde(default)]
    pub initial: f64,
    /// Internal value at which the hyperparameter is held fixed.
    #[serde(default)]
    pub fixed: Option<f64>,
}

impl HyperSpec {
    pub fn new(name: impl Into<String>, transform: Transform, prior: HyperPrior, initial: f64) -> Self {
        Self { name: name.into(), transform, prior, initial, fixed: None }
    }

    /// Log-precision with a Gamma prior on the precision.
    pub fn log_precision(name: impl Into<String>, shape: f64, rate: f64, initial: f64) -> Self {
        Self::new(name, Transform::Log, HyperPrior::LogGamma { shape, rate }, initial)
    }

    /// Fisher-z correlation with a normal prior on the internal scale.
    pub fn correlation(name: impl Into<String>, mean: f64, sd: f64, initial: f64) -> Self {
        Self::new(name, Transform::FisherZ, HyperPrior::Normal { mean, sd }, initial)
    }

    /// Scaling parameter with a normal prior on the natural scale.
    pub fn scaling(name: impl Into<String>, mean: f64, sd: f64) -> Self {
        Self::new(name, Transform::Identity, HyperPrior::Normal { mean, sd }, mean)
    }

    /// Holds the hyperparameter at the given natural-scale value.
    pub fn fixed_at(mut self, natural: f64) -> Result<Self> {
        let u = self.transform.to_internal(natural)?;
        self.fixed = Some(u);
        self.initial = u;
        Ok(self)
    }
}

/// Ordered hyperparameters of a model. The free ones form the exploration space.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HyperLayout {
    specs: Vec<HyperSpec>,
}

impl HyperLayout {
    pub fn new(specs: Vec<HyperSpec>) -> Result<Self> {
        for (i, s) in specs.iter().enumerate() {
            s.prior.validate()?;
            if specs[..i].iter().any(|o| o.name == s.name) {
                return invalid(format!("duplicate hyperparameter `{}`", s.name));
            }
            if !s.initial.is_finite() {
                return invalid(format!("non-finite initial value for `{}`", s.name));
            }
        }
        Ok(Self { specs })
    }

    pub fn specs(&self) -> &[HyperSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| LgmError::UnknownHyper(name.to_string()))
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.specs.len()).filter(|&i| self.specs[i].fixed.is_none()).collect()
    }

    pub fn n_free(&self) -> usize {
        self.specs.iter().filter(|s| s.fixed.is_none()).count()
    }

    pub fn free_names(&self) -> Vec<String> {
        self.specs.iter().filter(|s| s.fixed.is_none()).map(|s| s.name.clone()).collect()
    }

    pub fn free_specs(&self) -> Vec<&HyperSpec> {
        self.specs.iter().filter(|s| s.fixed.is_none()).collect()
    }

    pub fn initial_free(&self) -> Vec<f64> {
        self.specs.iter().filter(|s| s.fixed.is_none()).map(|s| s.initial).collect()
    }

    /// Natural-scale values of all hyperparameters given the free internal coordinates.
    pub fn values(&self, free: &[f64]) -> Result<HyperValues> {
        if free.len() != self.n_free() {
            return Err(LgmError::DimensionMismatch { context: "hyperparameter point", expected: self.n_free(), found: free.len() });
        }
        let mut it = free.iter();
        let mut values = Vec::with_capacity(self.specs.len());
        for s in &self.specs {
            let u = match s.fixed {
                Some(u) => u,
                None => *it.next().unwrap(),
            };
            if !u.is_finite() {
                return Err(LgmError::NonFinite("hyperparameter"));
            }
            values.push(s.transform.to_natural(u));
        }
        Ok(HyperValues { names: self.specs.iter().map(|s| s.name.clone()).collect(), values })
    }

    /// Sum of prior log-densities of the free hyperparameters.
    pub fn log_prior(&self, free: &[f64]) -> f64 {
        self.free_specs().iter().zip(free).map(|(s, &u)| s.prior.log_density(u)).sum()
    }
}

/// Natural-scale hyperparameter values addressed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperValues {
    names: Vec<String>,
    values: Vec<f64>,
}

impl HyperValues {
    pub fn from_pairs(pairs: &[(&str, f64)]) -> Self {
        Self {
            names: pairs.iter().map(|p| p.0.to_string()).collect(),
            values: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
            .ok_or_else(|| LgmError::UnknownHyper(name.to_string()))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transforms_round_trip() {
        for t in [Transform::Log, Transform::FisherZ, Transform::Identity] {
            let u = 0.37;
            let v = t.to_natural(u);
            assert!((t.to_internal(v).unwrap() - u).abs() < 1e-14);
        }
        assert!(Transform::Log.to_internal(-1.0).is_err());
        assert!(Transform::FisherZ.to_internal(1.0).is_err());
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        for t in [Transform::Log, Transform::FisherZ, Transform::Identity] {
            let u = 0.4;
            let h = 1e-6;
            let d = (t.to_natural(u + h) - t.to_natural(u - h)) / (2.0 * h);
            assert!((d.ln() - t.log_jacobian(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn log_gamma_prior_integrates_to_one() {
        let p = HyperPrior::LogGamma { shape: 1.5, rate: 0.7 };
        let h = 1e-3;
        let total: f64 = (-20_000..20_000).map(|i| p.log_density(i as f64 * h).exp() * h).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fixed_values_are_skipped() {
        let layout = HyperLayout::new(vec![
            HyperSpec::log_precision("tau", 1.0, 1.0, 0.0),
            HyperSpec::correlation("rho", 0.0, 1.0, 0.0).fixed_at(0.5).unwrap(),
        ])
        .unwrap();
        assert_eq!(layout.n_free(), 1);
        let v = layout.values(&[2f64.ln()]).unwrap();
        assert!((v.get("tau").unwrap() - 2.0).abs() < 1e-15);
        assert!((v.get("rho").unwrap() - 0.5).abs() < 1e-15);
        assert!(v.get("nope").is_err());
        assert!(HyperLayout::new(vec![HyperSpec::scaling("a", 1.0, 0.5), HyperSpec::scaling("a", 1.0, 0.5)]).is_err());
    }
}
