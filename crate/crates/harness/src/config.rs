//! Experiment configuration (JSON).

use std::path::{Path, PathBuf};

use lgm_core::consensus::ConsensusMode;
use lgm_core::laplace::EngineConfig;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::partition::PartitionRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    Recursive,
    Consensus,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Recursive => "recursive",
            Method::Consensus => "consensus",
        }
    }
}

/// Which sources of a multi-source scenario enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Joint,
    PrimaryOnly,
    SecondaryOnly,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Joint => "joint",
            Variant::PrimaryOnly => "primary_only",
            Variant::SecondaryOnly => "secondary_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionStructure {
    /// Full cover by 3 x 3 coarse blocks.
    S1,
    /// Four irregular patches covering part of the domain.
    S2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialFusionConfig {
    pub nrow: usize,
    pub ncol: usize,
    pub n_points: usize,
    pub structure: RegionStructure,
    pub range: f64,
    pub tau_s: f64,
    pub beta0: f64,
    pub tau_y: f64,
    pub expert_taus: [f64; 2],
    pub expert_rho: f64,
    /// Additive bias of each expert.
    pub expert_intercepts: [f64; 2],
    pub alpha: f64,
    /// Fit a free scaling of the regional means; otherwise the experts report them unscaled.
    pub estimate_alpha: bool,
    /// Precision of the tiny iid error on expert values; their noise lives in the correlated block.
    pub expert_nugget: f64,
}

impl Default for SpatialFusionConfig {
    fn default() -> Self {
        Self {
            nrow: 30,
            ncol: 30,
            n_points: 40,
            structure: RegionStructure::S1,
            range: 8.0,
            tau_s: 1.0,
            beta0: 0.5,
            tau_y: 4.0,
            expert_taus: [25.0, 25.0],
            expert_rho: 0.5,
            expert_intercepts: [0.0, 0.0],
            alpha: 1.0,
            estimate_alpha: false,
            expert_nugget: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategoricalConfig {
    pub n_per_fine: usize,
    pub n_per_coarse: usize,
    pub tau_u: f64,
    pub beta0: f64,
    pub tau_y: f64,
}

impl Default for CategoricalConfig {
    fn default() -> Self {
        Self { n_per_fine: 8, n_per_coarse: 25, tau_u: 1.0, beta0: 1.0, tau_y: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CountFamily {
    #[default]
    Gaussian,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatiotemporalConfig {
    pub nrow: usize,
    pub ncol: usize,
    pub n_time: usize,
    pub rho_t: f64,
    pub range: f64,
    pub tau_st: f64,
    pub beta0: f64,
    /// Gaussian noise precision (ignored for Poisson data).
    pub tau_y: f64,
    pub family: CountFamily,
}

impl Default for SpatiotemporalConfig {
    fn default() -> Self {
        Self { nrow: 5, ncol: 10, n_time: 60, rho_t: 0.7, range: 3.0, tau_st: 1.0, beta0: 1.0, tau_y: 4.0, family: CountFamily::Gaussian }
    }
}

/// Small Poisson lattice model with repeated counts per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoissonDeskConfig {
    pub nrow: usize,
    pub ncol: usize,
    pub n_rep: usize,
    pub range: f64,
    pub tau: f64,
    pub beta0: f64,
}

impl Default for PoissonDeskConfig {
    fn default() -> Self {
        Self { nrow: 5, ncol: 5, n_rep: 4, range: 3.0, tau: 2.0, beta0: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    SpatialFusion(SpatialFusionConfig),
    Categorical(CategoricalConfig),
    Spatiotemporal(SpatiotemporalConfig),
    PoissonDesk(PoissonDeskConfig),
}

impl Scenario {
    pub fn kind(&self) -> &'static str {
        match self {
            Scenario::SpatialFusion(_) => "spatial_fusion",
            Scenario::Categorical(_) => "categorical",
            Scenario::Spatiotemporal(_) => "spatiotemporal",
            Scenario::PoissonDesk(_) => "poisson_desk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Partition rule for the recursive and consensus methods, e.g. `time:10`.
    #[serde(default)]
    pub partitions: Option<String>,
    #[serde(default)]
    pub variant: Variant,
    /// Further variants fitted with the full method for truth-recovery comparison.
    #[serde(default)]
    pub baselines: Vec<Variant>,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub consensus_mode: ConsensusMode,
    #[serde(default = "default_boundary")]
    pub boundary_threshold: f64,
    /// Dataset CSV to use instead of simulating.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_methods() -> Vec<Method> {
    vec![Method::Full, Method::Recursive, Method::Consensus]
}

fn default_boundary() -> f64 {
    0.2
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            name: default_name(),
            scenario,
            seed: 0,
            methods: default_methods(),
            partitions: None,
            variant: Variant::Joint,
            baselines: Vec::new(),
            engine: EngineConfig::default(),
            consensus_mode: ConsensusMode::default(),
            boundary_threshold: default_boundary(),
            data: None,
            output_dir: None,
        }
    }

    /// Parses a config file; call [`ExperimentConfig::validate`] once overrides are applied.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        // relative data paths are resolved against the config file
        if let (Some(d), Some(dir)) = (&cfg.data, path.parent()) {
            if d.is_relative() {
                cfg.data = Some(dir.join(d));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return invalid("at least one method is required");
        }
        let needs_partitions = self.methods.iter().any(|m| *m != Method::Full);
        match &self.partitions {
            Some(p) => {
                PartitionRule::parse(p)?;
            }
            None if needs_partitions => return invalid("recursive and consensus methods need a partition rule"),
            None => {}
        }
        if !(self.boundary_threshold > 0.0) {
            return invalid("boundary threshold must be positive");
        }
        match &self.scenario {
            Scenario::SpatialFusion(c) => {
                if c.nrow < 4 || c.ncol < 4 || c.n_points == 0 {
                    return invalid("spatial fusion needs at least a 4 x 4 lattice and one point observation");
                }
                if !(c.expert_rho.abs() < 1.0) {
                    return invalid("expert correlation must lie in (-1, 1)");
                }
                positive(&[c.range, c.tau_s, c.tau_y, c.expert_taus[0], c.expert_taus[1], c.expert_nugget])?;
            }
            Scenario::Categorical(c) => {
                if c.n_per_fine == 0 || c.n_per_coarse == 0 {
                    return invalid("categorical sources need observations");
                }
                positive(&[c.tau_u, c.tau_y])?;
            }
            Scenario::Spatiotemporal(c) => {
                if c.nrow < 2 || c.ncol < 2 || c.n_time < 2 {
                    return invalid("spatiotemporal lattice needs at least 2 x 2 sites and 2 times");
                }
                if !(c.rho_t.abs() < 1.0) {
                    return invalid("rho_t must lie in (-1, 1)");
                }
                positive(&[c.range, c.tau_st, c.tau_y])?;
            }
            Scenario::PoissonDesk(c) => {
                if c.nrow < 2 || c.ncol < 2 || c.n_rep == 0 {
                    return invalid("desk model needs at least 2 x 2 sites and one replicate");
                }
                positive(&[c.range, c.tau])?;
            }
        }
        Ok(())
    }

    pub fn partition_rule(&self) -> Result<Option<PartitionRule>> {
        self.partitions.as_deref().map(PartitionRule::parse).transpose()
    }
}

fn positive(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| *x > 0.0 && x.is_finite()) {
        Ok(())
    } else {
        invalid("scale and precision parameters must be positive")
    }
}
