//! Sequential consensus: moment-based prior updating across partitions and
//! precision-weighted combination of latent posteriors.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LgmError, Result};
use crate::gmrf::cholesky::{CholeskyFactor, JitterPolicy};
use crate::gmrf::constraint::ConstraintCorrection;
use crate::gmrf::SparseSymmetric;
use crate::hyper::{HyperLayout, HyperPrior, HyperSpec};
use crate::laplace::explore::EngineConfig;
use crate::laplace::fit::{fit, PosteriorSummary};
use crate::laplace::marginals::mixture_marginals;
use crate::likelihood::ObservationBlock;
use crate::model::{BlockKind, ModelAssembly};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub mean: f64,
    pub precision: f64,
}

impl MomentSummary {
    pub fn new(mean: f64, precision: f64) -> Result<Self> {
        if !(precision > 0.0 && precision.is_finite() && mean.is_finite()) {
            return invalid(format!("invalid moments (mean {mean}, precision {precision})"));
        }
        Ok(Self { mean, precision })
    }
}

/// Adds the data increment of a partition fit to `prior`.
///
/// The increment is `posterior − fit_prior` in precision and in precision-weighted mean.
pub fn moment_update(prior: MomentSummary, posterior: MomentSummary, fit_prior: MomentSummary) -> Result<MomentSummary> {
    let inc_prec = posterior.precision - fit_prior.precision;
    let inc_info = posterior.precision * posterior.mean - fit_prior.precision * fit_prior.mean;
    let tol = 1e-12 * posterior.precision.max(fit_prior.precision);
    if inc_prec < -tol {
        return invalid(format!("negative precision increment {inc_prec}"));
    }
    if inc_prec.abs() <= tol {
        return Ok(prior);
    }
    let precision = prior.precision + inc_prec;
    Ok(MomentSummary { mean: (prior.precision * prior.mean + inc_info) / precision, precision })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusMarginal {
    pub mean: f64,
    pub precision: f64,
    pub weights: Vec<f64>,
}

/// Per-node precision-weighted average of partition means (`means[j][i]`, `precisions[j][i]`).
pub fn marginal_consensus(means: &[Vec<f64>], precisions: &[Vec<f64>]) -> Result<Vec<ConsensusMarginal>> {
    if means.is_empty() || means.len() != precisions.len() {
        return invalid("consensus needs matching, non-empty mean and precision lists");
    }
    let n = means[0].len();
    if means.iter().chain(precisions).any(|v| v.len() != n) {
        return Err(LgmError::DimensionMismatch { context: "marginal consensus", expected: n, found: 0 });
    }
    (0..n)
        .map(|i| {
            let total: f64 = precisions.iter().map(|p| p[i]).sum();
            if precisions.iter().any(|p| !(p[i] > 0.0)) {
                return invalid(format!("non-positive precision at node {i}"));
            }
            let weights: Vec<f64> = precisions.iter().map(|p| p[i] / total).collect();
            let mean = weights.iter().zip(means).map(|(w, m)| w * m[i]).sum();
            Ok(ConsensusMarginal { mean, precision: total, weights })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mean: Vec<f64>,
    pub precision: SparseSymmetric,
}

/// `Q = Σ Q_j`, `μ = Q⁻¹ Σ Q_j μ_j`.
pub fn multivariate_consensus(beliefs: &[GaussianBelief]) -> Result<GaussianBelief> {
    let first = beliefs.first().ok_or_else(|| LgmError::InvalidInput("no beliefs to combine".into()))?;
    let n = first.mean.len();
    let mut q = first.precision.clone();
    let mut h = first.precision.matvec(&first.mean);
    for b in &beliefs[1..] {
        if b.mean.len() != n || b.precision.dim() != n {
            return Err(LgmError::DimensionMismatch { context: "multivariate consensus", expected: n, found: b.mean.len() });
        }
        q = q.add(&b.precision)?;
        for (hi, v) in h.iter_mut().zip(b.precision.matvec(&b.mean)) {
            *hi += v;
        }
    }
    if beliefs.len() == 1 {
        return Ok(first.clone());
    }
    let f = crate::gmrf::cholesky::cholesky(&q, &JitterPolicy::none())?;
    Ok(GaussianBelief { mean: f.solve(&h)?, precision: q })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusMode {
    Marginal,
    #[default]
    Multivariate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ConsensusConfig {
    pub engine: EngineConfig,
    pub mode: ConsensusMode,
}

/// Per-partition record of the sequential run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFit {
    pub log_marginal_likelihood: f64,
    pub modal_point: Vec<f64>,
    pub hyper_moments: Vec<MomentSummary>,
}

fn is_fixed(kind: &BlockKind) -> bool {
    matches!(kind, BlockKind::FixedEffect { .. })
}

/// Fits partitions in sequence with updated fixed-effect and hyperparameter priors, then combines
/// the random-effect posteriors from each partition's modal configuration.
///
/// Multivariate mode sums the data information `Q_j − P_j` of every partition onto one copy of
/// the prior, so the prior enters once; marginal mode averages the partition marginals.
pub fn sequential_consensus_fit(
    model: &ModelAssembly,
    partitions: Vec<Vec<ObservationBlock>>,
    config: &ConsensusConfig,
) -> Result<(PosteriorSummary, Vec<PartitionFit>)> {
    let started = Instant::now();
    if partitions.is_empty() {
        return invalid("no partitions");
    }
    let cfg = &config.engine;
    let n = model.n_latent();
    if partitions.len() == 1 {
        let m = model.with_observations(partitions.into_iter().next().unwrap())?;
        let out = fit(&m, cfg)?;
        let mut s = out.summary;
        s.method = "sequential_consensus".into();
        let record = PartitionFit {
            log_marginal_likelihood: s.log_marginal_likelihood,
            modal_point: s.mode.clone(),
            hyper_moments: s.hyper_marginals.iter().map(|h| MomentSummary { mean: h.internal_mean, precision: h.internal_sd.powi(-2) }).collect(),
        };
        return Ok((s, vec![record]));
    }

    let mut current = model.with_observations(Vec::new())?;
    let mut records = Vec::new();
    let mut total_lml = 0.0;
    let mut info_q: Option<SparseSymmetric> = None;
    let mut info_h = vec![0.0; n];
    let mut part_means = Vec::new();
    let mut part_precisions = Vec::new();
    let mut last = None;
    let mut warnings = Vec::new();

    for part in partitions {
        let m = current.with_observations(part)?;
        let out = fit(&m, cfg)?;
        warnings.extend(out.summary.warnings.iter().cloned());
        let k = out.grid.mode_index;
        let a = &out.approxes[k];
        let theta = m.hyper().values(&out.grid.points[k])?;
        let p = m.prior_at(&theta)?;
        // Data information of this partition at its modal configuration.
        let data_q = a.precision.add(&p.precision.scaled(-1.0))?;
        let qa = a.precision.matvec(&a.mode);
        let pm = p.precision.matvec(&p.mean);
        for i in 0..n {
            info_h[i] += qa[i] - pm[i];
        }
        info_q = Some(match info_q {
            None => data_q,
            Some(q) => q.add(&data_q)?,
        });
        let vars = a.marginal_variances();
        part_precisions.push(vars.iter().map(|v| 1.0 / v.max(1e-300)).collect::<Vec<f64>>());
        part_means.push(a.mode.clone());
        total_lml += out.summary.log_marginal_likelihood;

        // Sequential prior updates for fixed effects and hyperparameters.
        let mut next = current.clone();
        for b in current.blocks() {
            if let BlockKind::FixedEffect { mean, precision } = &b.kind {
                let r = current.block_range(&b.name)?;
                let mut nm = Vec::with_capacity(mean.len());
                let mut np = Vec::with_capacity(mean.len());
                for (j, g) in r.enumerate() {
                    let prior = MomentSummary::new(mean[j], precision[j])?;
                    let post = MomentSummary::new(a.mode[g], 1.0 / vars[g])?;
                    let u = moment_update(prior, post, prior)?;
                    nm.push(u.mean);
                    np.push(u.precision);
                }
                next = next.with_block_kind(&b.name, BlockKind::FixedEffect { mean: nm, precision: np })?;
            }
        }
        let mut moments = Vec::new();
        let specs: Vec<HyperSpec> = current
            .hyper()
            .specs()
            .iter()
            .map(|s| {
                if s.fixed.is_some() {
                    return Ok(s.clone());
                }
                let h = out.summary.hyper(&s.name).ok_or_else(|| LgmError::UnknownHyper(s.name.clone()))?;
                let post = MomentSummary::new(h.internal_mean, h.internal_sd.powi(-2))?;
                let fit_prior = match s.prior {
                    HyperPrior::Normal { mean, sd } => MomentSummary::new(mean, sd.powi(-2))?,
                    _ => post,
                };
                // The prior being updated is the one used in this fit; a moment-matched posterior
                // wider than that prior carries no usable increment and replaces it.
                let u = moment_update(fit_prior, post, fit_prior).unwrap_or(post);
                moments.push(u);
                let mut s = s.clone();
                s.prior = HyperPrior::Normal { mean: u.mean, sd: u.precision.powf(-0.5) };
                s.initial = u.mean;
                Ok(s)
            })
            .collect::<Result<_>>()?;
        next = next.with_hyper(HyperLayout::new(specs)?)?;
        records.push(PartitionFit { log_marginal_likelihood: out.summary.log_marginal_likelihood, modal_point: out.grid.points[k].clone(), hyper_moments: moments });
        current = next;
        last = Some((out, theta));
    }

    let (last_out, theta) = last.expect("at least one partition");
    let mut means = vec![0.0; n];
    let mut vars = vec![0.0; n];
    match config.mode {
        ConsensusMode::Multivariate => {
            let base = model.prior_at(&theta)?;
            let q = base.precision.add(info_q.as_ref().expect("partitions were fitted"))?;
            let pm = base.precision.matvec(&base.mean);
            let h: Vec<f64> = pm.iter().zip(&info_h).map(|(a, b)| a + b).collect();
            let sym = model.symbolic_cache().get(&q)?;
            let f = CholeskyFactor::factorize(&sym, &q, &cfg.newton.jitter)?;
            let mut mu = f.solve(&h)?;
            let mut v = f.marginal_variances();
            if let Some(c) = ConstraintCorrection::new(&f, model.constraints())? {
                mu = c.correct(&mu);
                for (vi, r) in v.iter_mut().zip(c.variance_reduction()) {
                    *vi = (*vi - r).max(0.0);
                }
            }
            means = mu;
            vars = v;
        }
        ConsensusMode::Marginal => {
            let c = marginal_consensus(&part_means, &part_precisions)?;
            for (i, ci) in c.into_iter().enumerate() {
                means[i] = ci.mean;
                vars[i] = 1.0 / ci.precision;
            }
        }
    }
    // Fixed effects keep their sequentially updated moments.
    let final_a = &last_out.approxes[last_out.grid.mode_index];
    let final_vars = final_a.marginal_variances();
    for b in model.blocks() {
        if is_fixed(&b.kind) {
            for g in model.block_range(&b.name)? {
                means[g] = final_a.mode[g];
                vars[g] = final_vars[g];
            }
        }
    }
    let latent = mixture_marginals(&[1.0], &[&means], &[vars], cfg.density_points);
    let s = &last_out.summary;
    let summary = PosteriorSummary {
        method: "sequential_consensus".into(),
        latent_marginals: latent,
        hyper_marginals: s.hyper_marginals.clone(),
        log_marginal_likelihood: total_lml,
        hyper_names: s.hyper_names.clone(),
        mode: s.mode.clone(),
        n_support_points: s.n_support_points,
        newton_iterations: s.newton_iterations.clone(),
        mode_search_iterations: s.mode_search_iterations,
        warnings,
        runtime_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((summary, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(mean: f64, precision: f64) -> MomentSummary {
        MomentSummary::new(mean, precision).unwrap()
    }

    #[test]
    fn moment_update_product_algebra() {
        let u = moment_update(ms(0.0, 1.0), ms(1.0, 2.0), ms(0.0, 1.0)).unwrap();
        assert_eq!((u.mean, u.precision), (1.0, 2.0));
        let same = moment_update(ms(0.3, 4.0), ms(0.5, 1.0), ms(0.5, 1.0)).unwrap();
        assert_eq!(same, ms(0.3, 4.0));
        assert!(moment_update(ms(0.0, 1.0), ms(0.0, 1.0), ms(0.0, 2.0)).is_err());
    }

    #[test]
    fn marginal_consensus_weights() {
        let c = marginal_consensus(&[vec![0.0], vec![2.0]], &[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(c[0].mean, 1.0);
        let c = marginal_consensus(&[vec![0.0], vec![4.0]], &[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(c[0].mean, 3.0);
        assert_eq!(c[0].weights, vec![0.25, 0.75]);
        assert_eq!(c[0].precision, 4.0);
        assert!(marginal_consensus(&[vec![0.0]], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn multivariate_identity_case() {
        let b1 = GaussianBelief { mean: vec![0.0, 0.0], precision: SparseSymmetric::identity(2) };
        let b2 = GaussianBelief { mean: vec![2.0, 2.0], precision: SparseSymmetric::identity(2) };
        let c = multivariate_consensus(&[b1.clone(), b2]).unwrap();
        assert!(c.mean.iter().all(|m| (m - 1.0).abs() < 1e-15));
        assert_eq!(c.precision.diag(), vec![2.0, 2.0]);
        let one = multivariate_consensus(&[b1.clone()]).unwrap();
        assert_eq!(one.mean, b1.mean);
    }
}
