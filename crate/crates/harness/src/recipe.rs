//! Model recipes: turn a scenario and a dataset into a latent Gaussian model.

use lgm_core::fusion::{
    assemble_joint_model, build_areal_operator, build_categorical_operator, AggregationMode, AggregationOperator, AlphaBinding,
    CategoricalGrouping, ExpertLink, SecondarySource, SharedPredictorSpec,
};
use lgm_core::gmrf::SparseRows;
use lgm_core::hyper::{HyperLayout, HyperPrior, HyperSpec, Transform};
use lgm_core::likelihood::{LikelihoodSpec, ObservationBlock};
use lgm_core::model::{BlockKind, LatentBlockSpec, ModelAssembly};

use crate::config::{CategoricalConfig, CountFamily, PoissonDeskConfig, Scenario, SpatialFusionConfig, SpatiotemporalConfig, Variant};
use crate::dataset::{Dataset, Record};
use crate::error::{invalid, Result};
use crate::simulate::{categorical_groups, fusion_regions};

/// Vague prior precision of intercepts.
pub const INTERCEPT_PRECISION: f64 = 0.01;

/// Gamma(1, 0.05) on precisions.
fn precision_hyper(name: &str) -> HyperSpec {
    HyperSpec::log_precision(name, 1.0, 0.05, 0.0)
}

fn fixed(name: &str, transform: Transform, value: f64) -> Result<HyperSpec> {
    Ok(HyperSpec::new(name, transform, HyperPrior::Flat, 0.0).fixed_at(value)?)
}

fn intercept(name: &str, n: usize) -> LatentBlockSpec {
    LatentBlockSpec::new(name, BlockKind::FixedEffect { mean: vec![0.0; n], precision: vec![INTERCEPT_PRECISION; n] })
}

/// A model together with the placement of every dataset row inside its observation blocks.
#[derive(Debug, Clone)]
pub struct Built {
    pub model: ModelAssembly,
    /// `(block, row within block)` per dataset row; `None` when the variant leaves the row out.
    pub placement: Vec<Option<(usize, usize)>>,
}

impl Built {
    /// Observation blocks restricted to the given dataset rows; empty blocks are dropped.
    pub fn blocks_for(&self, rows: &[usize]) -> Vec<ObservationBlock> {
        let obs = self.model.observations();
        let mut per_block: Vec<Vec<usize>> = vec![Vec::new(); obs.len()];
        for &r in rows {
            if let Some((b, i)) = self.placement[r] {
                per_block[b].push(i);
            }
        }
        per_block.iter().enumerate().filter(|(_, s)| !s.is_empty()).map(|(b, s)| obs[b].select(s)).collect()
    }

    /// Per-partition observation blocks; partitions holding no modelled rows are skipped.
    pub fn partition_blocks(&self, parts: &[Vec<usize>]) -> Vec<Vec<ObservationBlock>> {
        parts.iter().map(|p| self.blocks_for(p)).filter(|b| !b.is_empty()).collect()
    }
}

/// Collects rows by source, in table order, and records where each lands.
struct Placer {
    placement: Vec<Option<(usize, usize)>>,
    n_blocks: usize,
}

impl Placer {
    fn new(n: usize) -> Self {
        Self { placement: vec![None; n], n_blocks: 0 }
    }

    /// Registers the rows of `source` as the next block and returns them.
    fn take<'a>(&mut self, data: &'a Dataset, source: usize) -> Vec<(usize, &'a Record)> {
        let rows: Vec<(usize, &Record)> = data.records.iter().enumerate().filter(|(_, r)| r.source == source).collect();
        for (i, (r, _)) in rows.iter().enumerate() {
            self.placement[*r] = Some((self.n_blocks, i));
        }
        self.n_blocks += 1;
        rows
    }
}

fn values(rows: &[(usize, &Record)]) -> Vec<f64> {
    rows.iter().map(|(_, r)| r.response).collect()
}

fn with_scales(block: ObservationBlock, rows: &[(usize, &Record)]) -> Result<ObservationBlock> {
    if rows.iter().any(|(_, r)| r.phi.is_some()) {
        Ok(block.with_precision_scales(rows.iter().map(|(_, r)| r.phi.unwrap_or(1.0)).collect())?)
    } else {
        Ok(block)
    }
}

fn need<T>(v: Option<T>, row: usize, what: &str) -> Result<T> {
    match v {
        Some(v) => Ok(v),
        None => invalid(format!("row {row} is missing its {what} index")),
    }
}

pub fn build_model(scenario: &Scenario, data: &Dataset, variant: Variant) -> Result<Built> {
    if data.is_empty() {
        return invalid("dataset has no rows");
    }
    match scenario {
        Scenario::SpatialFusion(c) => spatial_fusion(c, data, variant),
        Scenario::Categorical(c) => categorical(c, data, variant),
        Scenario::Spatiotemporal(c) => spatiotemporal(c, data, variant),
        Scenario::PoissonDesk(c) => poisson_desk(c, data, variant),
    }
}

fn single_source(variant: Variant, kind: &str) -> Result<()> {
    match variant {
        Variant::Joint | Variant::PrimaryOnly => Ok(()),
        Variant::SecondaryOnly => invalid(format!("{kind} has no secondary source")),
    }
}

fn spatial_fusion(c: &SpatialFusionConfig, data: &Dataset, variant: Variant) -> Result<Built> {
    single_source(variant, "spatial fusion")?;
    let n = c.nrow * c.ncol;
    let regions = fusion_regions(c.nrow, c.ncol, c.structure);
    let nr = regions.len();
    data.check(3, Some(n), None, &[0, nr, nr])?;
    let joint = variant == Variant::Joint;

    let mut blocks = vec![
        intercept("beta0", 1),
        LatentBlockSpec::new("field", BlockKind::LatticeMatern { nrow: c.nrow, ncol: c.ncol, range: "range".into(), precision: "tau_s".into() }),
    ];
    if joint {
        blocks.push(intercept("beta_ex", 2));
    }
    let n0 = 1 + n + if joint { 2 } else { 0 };
    let mut hypers = vec![fixed("range", Transform::Log, c.range)?, precision_hyper("tau_s"), precision_hyper("tau_y")];
    if joint {
        if c.estimate_alpha {
            hypers.push(HyperSpec::scaling("alpha", 1.0, 0.5));
        }
        hypers.extend([
            fixed("tau_e1", Transform::Log, c.expert_taus[0])?,
            fixed("tau_e2", Transform::Log, c.expert_taus[1])?,
            fixed("rho_e", Transform::FisherZ, c.expert_rho)?,
            fixed("tau_nug", Transform::Log, c.expert_nugget)?,
        ]);
    }

    let mut placer = Placer::new(data.len());
    let points = placer.take(data, 0);
    let mut rows = Vec::with_capacity(points.len());
    for (r, rec) in &points {
        rows.push(vec![(0, 1.0), (1 + need(rec.site, *r, "site")?, 1.0)]);
    }
    let obs = with_scales(ObservationBlock::new(values(&points), SparseRows::from_rows(n0, rows)?, LikelihoodSpec::gaussian("tau_y"))?, &points)?;
    let primary = ModelAssembly::new(blocks, vec![obs], HyperLayout::new(hypers)?)?;
    if !joint {
        return Ok(Built { model: primary, placement: placer.placement });
    }

    let areal = build_areal_operator(n, &regions, AggregationMode::Mean)?;
    let shared = SparseRows::from_rows(n0, (0..n).map(|s| vec![(0, 1.0), (1 + s, 1.0)]).collect())?;
    let mut sources = Vec::new();
    for k in 0..2 {
        let rows = placer.take(data, k + 1);
        let levels = rows.iter().map(|(r, rec)| need(rec.level, *r, "region")).collect::<Result<Vec<_>>>()?;
        let own = SparseRows::from_rows(n0, vec![vec![(1 + n + k, 1.0)]; rows.len()])?;
        let block = with_scales(ObservationBlock::new(values(&rows), own, LikelihoodSpec::gaussian("tau_nug"))?, &rows)?;
        sources.push(SecondarySource {
            block,
            operator: AggregationOperator { matrix: areal.matrix.select_rows(&levels), mode: AggregationMode::Mean, provenance: areal.provenance.clone() },
            spec: SharedPredictorSpec {
                shared: shared.clone(),
                alpha: if c.estimate_alpha { AlphaBinding::Hyper("alpha".into()) } else { AlphaBinding::Fixed(1.0) },
                residual: None,
                expert: Some(ExpertLink {
                    block: "expert".into(),
                    source: k,
                    taus: vec!["tau_e1".into(), "tau_e2".into()],
                    rhos: vec!["rho_e".into()],
                    n_replicates: nr,
                    replicate_of_row: levels,
                }),
            },
        });
    }
    Ok(Built { model: assemble_joint_model(&primary, sources)?, placement: placer.placement })
}

fn categorical(_: &CategoricalConfig, data: &Dataset, variant: Variant) -> Result<Built> {
    data.check(2, None, None, &[5, 3])?;
    let mut placer = Placer::new(data.len());
    let level_rows = |rows: &[(usize, &Record)], ncols: usize, with_level: bool| -> Result<SparseRows> {
        let r = rows
            .iter()
            .map(|(i, rec)| {
                let l = need(rec.level, *i, "level")?;
                Ok(if with_level { vec![(0, 1.0), (1 + l, 1.0)] } else { vec![(0, 1.0)] })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SparseRows::from_rows(ncols, r)?)
    };
    if variant == Variant::SecondaryOnly {
        let rows = placer.take(data, 1);
        let blocks = vec![intercept("beta0", 1), LatentBlockSpec::new("u_b", BlockKind::Iid { n: 3, precision: "tau_u".into() }).with_sum_to_zero()];
        let obs = with_scales(ObservationBlock::new(values(&rows), level_rows(&rows, 4, true)?, LikelihoodSpec::gaussian("tau_b"))?, &rows)?;
        let hyper = HyperLayout::new(vec![precision_hyper("tau_u"), precision_hyper("tau_b")])?;
        return Ok(Built { model: ModelAssembly::new(blocks, vec![obs], hyper)?, placement: placer.placement });
    }

    let blocks = vec![intercept("beta0", 1), LatentBlockSpec::new("u_a", BlockKind::Iid { n: 5, precision: "tau_u".into() }).with_sum_to_zero()];
    let rows_a = placer.take(data, 0);
    let obs_a = with_scales(ObservationBlock::new(values(&rows_a), level_rows(&rows_a, 6, true)?, LikelihoodSpec::gaussian("tau_a"))?, &rows_a)?;
    let mut hypers = vec![precision_hyper("tau_u"), precision_hyper("tau_a")];
    if variant == Variant::Joint {
        hypers.push(precision_hyper("tau_b"));
    }
    let primary = ModelAssembly::new(blocks, vec![obs_a], HyperLayout::new(hypers)?)?;
    if variant == Variant::PrimaryOnly {
        return Ok(Built { model: primary, placement: placer.placement });
    }

    let rows_b = placer.take(data, 1);
    let levels = rows_b.iter().map(|(r, rec)| need(rec.level, *r, "level")).collect::<Result<Vec<_>>>()?;
    let grouping = build_categorical_operator(&CategoricalGrouping::balanced(5, categorical_groups())?)?;
    let source = SecondarySource {
        block: with_scales(ObservationBlock::new(values(&rows_b), level_rows(&rows_b, 6, false)?, LikelihoodSpec::gaussian("tau_b"))?, &rows_b)?,
        operator: AggregationOperator { matrix: grouping.matrix.select_rows(&levels), mode: grouping.mode, provenance: grouping.provenance.clone() },
        spec: SharedPredictorSpec {
            shared: SparseRows::from_rows(6, (0..5).map(|i| vec![(1 + i, 1.0)]).collect())?,
            alpha: AlphaBinding::Fixed(1.0),
            residual: None,
            expert: None,
        },
    };
    Ok(Built { model: assemble_joint_model(&primary, vec![source])?, placement: placer.placement })
}

fn spatiotemporal(c: &SpatiotemporalConfig, data: &Dataset, variant: Variant) -> Result<Built> {
    single_source(variant, "the spatio-temporal model")?;
    let ns = c.nrow * c.ncol;
    data.check(1, Some(ns), Some(c.n_time), &[])?;
    let n0 = 1 + ns * c.n_time;
    let blocks = vec![
        intercept("beta0", 1),
        LatentBlockSpec::new(
            "st",
            BlockKind::KroneckerAr1Lattice {
                n_time: c.n_time,
                nrow: c.nrow,
                ncol: c.ncol,
                rho: "rho_t".into(),
                range: "range".into(),
                precision: "tau_st".into(),
            },
        ),
    ];
    let mut hypers = vec![fixed("range", Transform::Log, c.range)?, HyperSpec::correlation("rho_t", 0.0, 1.0, 0.0), precision_hyper("tau_st")];
    let lik = match c.family {
        CountFamily::Gaussian => {
            hypers.push(precision_hyper("tau_y"));
            LikelihoodSpec::gaussian("tau_y")
        }
        CountFamily::Poisson => LikelihoodSpec::poisson(),
    };
    let mut placer = Placer::new(data.len());
    let rows = placer.take(data, 0);
    let design = rows
        .iter()
        .map(|(r, rec)| Ok(vec![(0, 1.0), (1 + need(rec.time, *r, "time")? * ns + need(rec.site, *r, "site")?, 1.0)]))
        .collect::<Result<Vec<_>>>()?;
    let obs = with_scales(ObservationBlock::new(values(&rows), SparseRows::from_rows(n0, design)?, lik)?, &rows)?;
    Ok(Built { model: ModelAssembly::new(blocks, vec![obs], HyperLayout::new(hypers)?)?, placement: placer.placement })
}

fn poisson_desk(c: &PoissonDeskConfig, data: &Dataset, variant: Variant) -> Result<Built> {
    single_source(variant, "the desk model")?;
    let n = c.nrow * c.ncol;
    data.check(1, Some(n), None, &[])?;
    let blocks = vec![
        intercept("beta0", 1),
        LatentBlockSpec::new("field", BlockKind::LatticeMatern { nrow: c.nrow, ncol: c.ncol, range: "range".into(), precision: "tau".into() }),
    ];
    let hypers = vec![fixed("range", Transform::Log, c.range)?, precision_hyper("tau")];
    let mut placer = Placer::new(data.len());
    let rows = placer.take(data, 0);
    let design = rows.iter().map(|(r, rec)| Ok(vec![(0, 1.0), (1 + need(rec.site, *r, "site")?, 1.0)])).collect::<Result<Vec<_>>>()?;
    let obs = ObservationBlock::new(values(&rows), SparseRows::from_rows(1 + n, design)?, LikelihoodSpec::poisson())?;
    Ok(Built { model: ModelAssembly::new(blocks, vec![obs], HyperLayout::new(hypers)?)?, placement: placer.placement })
}
