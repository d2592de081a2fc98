//! Latent blocks, observation blocks and hyperparameters assembled into one model.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LgmError, Result};
use crate::fusion::build_expert_covariance;
use crate::gmrf::builders::{
    ar1_log_det, build_ar1_precision, build_iid_precision, build_rw1_precision, kronecker, lattice_center, lattice_matern_structure,
};
use crate::gmrf::cholesky::{cholesky, JitterPolicy, OrderingKind, SymbolicCache};
use crate::gmrf::constraint::{gaussian_log_density, ConstraintCorrection, LinearConstraints};
use crate::gmrf::{SparseSymmetric, TripletBuilder};
use crate::hyper::{HyperLayout, HyperValues};
use crate::likelihood::{Family, ObservationBlock};

/// Relative diagonal jitter that makes intrinsic blocks proper.
pub const INTRINSIC_JITTER: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockKind {
    Iid { n: usize, precision: String },
    /// Carries an implicit sum-to-zero constraint.
    Rw1 { n: usize, precision: String },
    Ar1 { n: usize, rho: String, precision: String },
    LatticeMatern { nrow: usize, ncol: usize, range: String, precision: String },
    /// Node `t * nrow * ncol + s` is site `s` at time `t`.
    KroneckerAr1Lattice { n_time: usize, nrow: usize, ncol: usize, rho: String, range: String, precision: String },
    /// Independent Gaussian priors with known moments.
    FixedEffect { mean: Vec<f64>, precision: Vec<f64> },
    /// `replicates` independent copies of an `m`-variate Gaussian with covariance
    /// `Σ_ii = 1/τ_i`, `Σ_ij = ρ_ij / √(τ_i τ_j)`; node `r * m + i` is source `i` of replicate `r`.
    /// `rhos` lists the pairs `(0,1), (0,2), …, (1,2), …` in order.
    MvnDense { m: usize, replicates: usize, taus: Vec<String>, rhos: Vec<String> },
}

impl BlockKind {
    pub fn size(&self) -> usize {
        match self {
            BlockKind::Iid { n, .. } | BlockKind::Rw1 { n, .. } | BlockKind::Ar1 { n, .. } => *n,
            BlockKind::LatticeMatern { nrow, ncol, .. } => nrow * ncol,
            BlockKind::KroneckerAr1Lattice { n_time, nrow, ncol, .. } => n_time * nrow * ncol,
            BlockKind::FixedEffect { mean, .. } => mean.len(),
            BlockKind::MvnDense { m, replicates, .. } => m * replicates,
        }
    }

    pub fn hyper_bindings(&self) -> Vec<&str> {
        match self {
            BlockKind::Iid { precision, .. } | BlockKind::Rw1 { precision, .. } => vec![precision],
            BlockKind::Ar1 { rho, precision, .. } => vec![rho, precision],
            BlockKind::LatticeMatern { range, precision, .. } => vec![range, precision],
            BlockKind::KroneckerAr1Lattice { rho, range, precision, .. } => vec![rho, range, precision],
            BlockKind::FixedEffect { .. } => vec![],
            BlockKind::MvnDense { taus, rhos, .. } => taus.iter().chain(rhos).map(String::as_str).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBlockSpec {
    pub name: String,
    pub kind: BlockKind,
    /// Block-local constraints `aᵀ x = c`.
    #[serde(default)]
    pub constraints: Vec<(Vec<f64>, f64)>,
}

impl LatentBlockSpec {
    pub fn new(name: impl Into<String>, kind: BlockKind) -> Self {
        let mut spec = Self { name: name.into(), kind, constraints: Vec::new() };
        if let BlockKind::Rw1 { n, .. } = spec.kind {
            spec.constraints.push((vec![1.0; n], 0.0));
        }
        spec
    }

    pub fn with_sum_to_zero(mut self) -> Self {
        let n = self.kind.size();
        if !self.constraints.iter().any(|(a, c)| *c == 0.0 && a.iter().all(|v| *v == 1.0)) {
            self.constraints.push((vec![1.0; n], 0.0));
        }
        self
    }

    pub fn with_constraint(mut self, a: Vec<f64>, c: f64) -> Self {
        self.constraints.push((a, c));
        self
    }

    pub fn size(&self) -> usize {
        self.kind.size()
    }

    fn local_constraints(&self) -> Result<LinearConstraints> {
        let (rows, rhs): (Vec<_>, Vec<_>) = self.constraints.iter().cloned().unzip();
        LinearConstraints::new(self.size(), rows, rhs)
    }
}

/// Prior of the latent field at one hyperparameter value.
#[derive(Debug, Clone)]
pub struct LatentPrior {
    pub mean: Vec<f64>,
    pub precision: SparseSymmetric,
    pub log_det: f64,
    /// `Σ_b log N(e_b; A_b m_b, A_b Q_b⁻¹ A_bᵀ)` over constrained blocks.
    pub constraint_log_norm: f64,
}

impl LatentPrior {
    /// Log-density of the (constrained) prior at `x`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        gaussian_log_density(x, &self.mean, &self.precision, self.log_det) - self.constraint_log_norm
    }
}

/// A complete latent Gaussian model.
#[derive(Debug, Clone)]
pub struct ModelAssembly {
    blocks: Vec<LatentBlockSpec>,
    offsets: Vec<usize>,
    n_latent: usize,
    observations: Vec<ObservationBlock>,
    hyper: HyperLayout,
    constraints: LinearConstraints,
    cache: Arc<SymbolicCache>,
}

impl ModelAssembly {
    pub fn new(blocks: Vec<LatentBlockSpec>, observations: Vec<ObservationBlock>, hyper: HyperLayout) -> Result<Self> {
        if blocks.is_empty() {
            return invalid("model needs at least one latent block");
        }
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut n = 0;
        for (i, b) in blocks.iter().enumerate() {
            if blocks[..i].iter().any(|o| o.name == b.name) {
                return invalid(format!("duplicate latent block `{}`", b.name));
            }
            if b.size() == 0 {
                return invalid(format!("latent block `{}` is empty", b.name));
            }
            validate_kind(&b.kind)?;
            for name in b.kind.hyper_bindings() {
                hyper.index_of(name)?;
            }
            offsets.push(n);
            n += b.size();
        }
        let mut constraints = LinearConstraints::none(n);
        for (b, &off) in blocks.iter().zip(&offsets) {
            for (a, _) in &b.constraints {
                if a.len() != b.size() {
                    return Err(LgmError::DimensionMismatch { context: "block constraint", expected: b.size(), found: a.len() });
                }
            }
            let local = b.local_constraints()?;
            if !local.is_empty() {
                constraints = constraints.stacked(&local.embedded(off, n)?)?;
            }
        }
        let model = Self {
            blocks,
            offsets,
            n_latent: n,
            observations: Vec::new(),
            hyper,
            constraints,
            cache: Arc::new(SymbolicCache::new(OrderingKind::Auto)),
        };
        model.with_observations(observations)
    }

    /// The same latent structure and hyperparameters with a different set of observations.
    pub fn with_observations(&self, observations: Vec<ObservationBlock>) -> Result<Self> {
        for ob in &observations {
            ob.validate()?;
            if ob.ncols() != self.n_latent {
                return Err(LgmError::DimensionMismatch { context: "design columns", expected: self.n_latent, found: ob.ncols() });
            }
            for name in &ob.likelihood.hyper_bindings {
                self.hyper.index_of(name)?;
            }
            if let Some(s) = &ob.scaled_design {
                self.hyper.index_of(&s.alpha)?;
            }
        }
        let mut out = self.clone();
        out.observations = observations;
        Ok(out)
    }

    /// Replaces the hyperparameter layout (names bound by blocks must still resolve).
    pub fn with_hyper(&self, hyper: HyperLayout) -> Result<Self> {
        for b in &self.blocks {
            for name in b.kind.hyper_bindings() {
                hyper.index_of(name)?;
            }
        }
        let mut out = self.clone();
        out.hyper = hyper;
        out.with_observations(self.observations.clone())
    }

    /// Replaces one block's kind, keeping its size.
    pub fn with_block_kind(&self, name: &str, kind: BlockKind) -> Result<Self> {
        let i = self.block_index(name)?;
        if kind.size() != self.blocks[i].size() {
            return invalid("replacement block must keep its size");
        }
        let mut blocks = self.blocks.clone();
        blocks[i].kind = kind;
        let m = Self::new(blocks, self.observations.clone(), self.hyper.clone())?;
        Ok(Self { cache: Arc::clone(&self.cache), ..m })
    }

    pub fn n_latent(&self) -> usize {
        self.n_latent
    }

    pub fn blocks(&self) -> &[LatentBlockSpec] {
        &self.blocks
    }

    pub fn block_index(&self, name: &str) -> Result<usize> {
        self.blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| LgmError::InvalidInput(format!("no latent block named `{name}`")))
    }

    /// Global index range of a block.
    pub fn block_range(&self, name: &str) -> Result<std::ops::Range<usize>> {
        let i = self.block_index(name)?;
        Ok(self.offsets[i]..self.offsets[i] + self.blocks[i].size())
    }

    pub fn observations(&self) -> &[ObservationBlock] {
        &self.observations
    }

    pub fn n_observations(&self) -> usize {
        self.observations.iter().map(ObservationBlock::len).sum()
    }

    pub fn hyper(&self) -> &HyperLayout {
        &self.hyper
    }

    pub fn constraints(&self) -> &LinearConstraints {
        &self.constraints
    }

    pub fn symbolic_cache(&self) -> &SymbolicCache {
        &self.cache
    }

    pub fn is_gaussian(&self) -> bool {
        self.observations.iter().all(|o| o.likelihood.family == Family::Gaussian)
    }

    /// Prior mean, precision and normalizing terms at the given hyperparameters.
    pub fn prior_at(&self, theta: &HyperValues) -> Result<LatentPrior> {
        let n = self.n_latent;
        let mut t = TripletBuilder::new(n);
        let mut mean = vec![0.0; n];
        let mut log_det = 0.0;
        let mut constraint_log_norm = 0.0;
        for (b, &off) in self.blocks.iter().zip(&self.offsets) {
            let (q, ld, m) = block_prior(&b.kind, theta)?;
            if let Some(m) = &m {
                mean[off..off + m.len()].copy_from_slice(m);
            }
            if !b.constraints.is_empty() {
                let f = cholesky(&q, &JitterPolicy::default())?;
                let local = b.local_constraints()?;
                let corr = ConstraintCorrection::new(&f, &local)?.expect("non-empty constraints");
                let bm = m.unwrap_or_else(|| vec![0.0; q.dim()]);
                constraint_log_norm += corr.log_density_of_constraint(&bm);
            }
            t.add_block(off, &q);
            log_det += ld;
        }
        Ok(LatentPrior { mean, precision: t.build()?, log_det, constraint_log_norm })
    }
}

fn validate_kind(kind: &BlockKind) -> Result<()> {
    match kind {
        BlockKind::Rw1 { n, .. } if *n < 2 => invalid("RW1 block needs at least two nodes"),
        BlockKind::LatticeMatern { nrow, ncol, .. } | BlockKind::KroneckerAr1Lattice { nrow, ncol, .. }
            if *nrow < 2 || *ncol < 2 =>
        {
            invalid("lattice blocks need at least 2 rows and 2 columns")
        }
        BlockKind::FixedEffect { mean, precision } => {
            if mean.len() != precision.len() {
                return invalid("fixed effect mean and precision lengths differ");
            }
            if precision.iter().any(|p| !(*p > 0.0 && p.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
                return invalid("fixed effect priors need finite means and positive precisions");
            }
            Ok(())
        }
        BlockKind::MvnDense { m, taus, rhos, .. } => {
            if taus.len() != *m || rhos.len() != m * (m - 1) / 2 {
                return invalid("mvn block needs m precisions and m(m-1)/2 correlations");
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Precision, log-determinant and (non-zero) mean of one block.
fn block_prior(kind: &BlockKind, theta: &HyperValues) -> Result<(SparseSymmetric, f64, Option<Vec<f64>>)> {
    match kind {
        BlockKind::Iid { n, precision } => {
            let tau = theta.get(precision)?;
            Ok((build_iid_precision(*n, tau)?, *n as f64 * tau.ln(), None))
        }
        BlockKind::Rw1 { n, precision } => {
            let tau = theta.get(precision)?;
            let q = build_rw1_precision(*n, tau)?;
            let jitter = INTRINSIC_JITTER * q.max_diag();
            let q = q.add(&SparseSymmetric::diagonal(&vec![jitter; *n]))?;
            let ld = cholesky(&q, &JitterPolicy::none())?.log_det();
            Ok((q, ld, None))
        }
        BlockKind::Ar1 { n, rho, precision } => {
            let (r, tau) = (theta.get(rho)?, theta.get(precision)?);
            Ok((build_ar1_precision(*n, r, tau)?, ar1_log_det(*n, r, tau), None))
        }
        BlockKind::LatticeMatern { nrow, ncol, range, precision } => {
            let (range, tau) = (theta.get(range)?, theta.get(precision)?);
            let (q0, scale, ld0) = lattice_parts(*nrow, *ncol, range)?;
            let n = (nrow * ncol) as f64;
            Ok((q0.scaled(tau * scale), ld0 + n * (tau * scale).ln(), None))
        }
        BlockKind::KroneckerAr1Lattice { n_time, nrow, ncol, rho, range, precision } => {
            let (r, range, tau) = (theta.get(rho)?, theta.get(range)?, theta.get(precision)?);
            let (q0, scale, ld0) = lattice_parts(*nrow, *ncol, range)?;
            let ns = (nrow * ncol) as f64;
            let nt = *n_time as f64;
            let qt = build_ar1_precision(*n_time, r, 1.0)?;
            let q = kronecker(&qt, &q0.scaled(tau * scale))?;
            let ld = ns * ar1_log_det(*n_time, r, 1.0) + nt * (ld0 + ns * (tau * scale).ln());
            Ok((q, ld, None))
        }
        BlockKind::FixedEffect { mean, precision } => {
            let ld = precision.iter().map(|p| p.ln()).sum();
            Ok((SparseSymmetric::diagonal(precision), ld, Some(mean.clone())))
        }
        BlockKind::MvnDense { m, replicates, taus, rhos } => {
            let tv: Vec<f64> = taus.iter().map(|n| theta.get(n)).collect::<Result<_>>()?;
            let rv: Vec<f64> = rhos.iter().map(|n| theta.get(n)).collect::<Result<_>>()?;
            let p = build_expert_covariance(&tv, &rv)?;
            let chol = p
                .clone()
                .cholesky()
                .ok_or(LgmError::NotPositiveDefinite { index: 0, pivot: f64::NAN })?;
            let ld_one: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let mut t = TripletBuilder::new(m * replicates);
            for r in 0..*replicates {
                add_dense_block(&mut t, r * m, &p);
            }
            Ok((t.build()?, *replicates as f64 * ld_one, None))
        }
    }
}

fn add_dense_block(t: &mut TripletBuilder, off: usize, p: &DMatrix<f64>) {
    for j in 0..p.ncols() {
        for i in j..p.nrows() {
            t.add(off + i, off + j, p[(i, j)]);
        }
    }
}

/// Unscaled lattice structure, its calibration factor `1 / var(centre)` and `log |structure|`.
fn lattice_parts(nrow: usize, ncol: usize, range: f64) -> Result<(SparseSymmetric, f64, f64)> {
    let q0 = lattice_matern_structure(nrow, ncol, range)?;
    let f = cholesky(&q0, &JitterPolicy::none())?;
    let c = lattice_center(nrow, ncol);
    let mut e = vec![0.0; q0.dim()];
    e[c] = 1.0;
    let v = f.solve(&e)?[c];
    Ok((q0, v, f.log_det()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::SparseRows;
    use crate::hyper::HyperSpec;
    use crate::likelihood::LikelihoodSpec;

    fn layout() -> HyperLayout {
        HyperLayout::new(vec![
            HyperSpec::log_precision("tau", 1.0, 1.0, 0.0),
            HyperSpec::correlation("rho", 0.0, 1.0, 0.3),
            HyperSpec::log_precision("range", 1.0, 1.0, 0.5),
            HyperSpec::log_precision("noise", 1.0, 1.0, 0.0),
        ])
        .unwrap()
    }

    #[test]
    fn prior_log_det_matches_factorization() {
        let theta = HyperValues::from_pairs(&[("tau", 1.7), ("rho", 0.4), ("range", 2.5), ("noise", 1.0)]);
        let kinds = vec![
            BlockKind::Iid { n: 3, precision: "tau".into() },
            BlockKind::Ar1 { n: 5, rho: "rho".into(), precision: "tau".into() },
            BlockKind::LatticeMatern { nrow: 3, ncol: 4, range: "range".into(), precision: "tau".into() },
            BlockKind::KroneckerAr1Lattice {
                n_time: 3,
                nrow: 2,
                ncol: 3,
                rho: "rho".into(),
                range: "range".into(),
                precision: "tau".into(),
            },
            BlockKind::FixedEffect { mean: vec![1.0, -1.0], precision: vec![0.1, 2.0] },
            BlockKind::MvnDense { m: 2, replicates: 3, taus: vec!["tau".into(), "noise".into()], rhos: vec!["rho".into()] },
        ];
        for kind in kinds {
            let n = kind.size();
            let model = ModelAssembly::new(vec![LatentBlockSpec::new("b", kind)], vec![], layout()).unwrap();
            let p = model.prior_at(&theta).unwrap();
            let f = cholesky(&p.precision, &JitterPolicy::none()).unwrap();
            assert!((f.log_det() - p.log_det).abs() < 1e-8 * n as f64, "{} vs {}", f.log_det(), p.log_det);
        }
    }

    #[test]
    fn rw1_block_is_jittered_and_constrained() {
        let model = ModelAssembly::new(
            vec![LatentBlockSpec::new("f", BlockKind::Rw1 { n: 4, precision: "tau".into() })],
            vec![],
            layout(),
        )
        .unwrap();
        assert_eq!(model.constraints().len(), 1);
        let p = model.prior_at(&HyperValues::from_pairs(&[("tau", 1.0)])).unwrap();
        assert!(p.precision.get(0, 0) > 1.0);
    }

    #[test]
    fn validation_errors() {
        let iid = |p: &str| LatentBlockSpec::new("u", BlockKind::Iid { n: 2, precision: p.into() });
        assert!(ModelAssembly::new(vec![iid("missing")], vec![], layout()).is_err());
        let ob = ObservationBlock::new(vec![0.0], SparseRows::identity(1), LikelihoodSpec::gaussian("noise")).unwrap();
        assert!(ModelAssembly::new(vec![iid("tau")], vec![ob], layout()).is_err());
        assert!(ModelAssembly::new(vec![iid("tau"), iid("tau")], vec![], layout()).is_err());
    }
}
