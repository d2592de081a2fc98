//! Change-of-support operators and joint models for misaligned data sources.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LgmError, Result};
use crate::gmrf::SparseRows;
use crate::likelihood::ObservationBlock;
use crate::model::{BlockKind, LatentBlockSpec, ModelAssembly};

/// A set of integration points (lattice cells, time points or space-time voxels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: String,
    pub members: Vec<usize>,
    pub measure: f64,
}

impl Region {
    pub fn new(id: impl Into<String>, members: Vec<usize>) -> Self {
        let measure = members.len() as f64;
        Self { id: id.into(), members, measure }
    }

    pub fn with_measure(mut self, measure: f64) -> Self {
        self.measure = measure;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Mean,
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationOperator {
    pub matrix: SparseRows,
    pub mode: AggregationMode,
    pub provenance: String,
}

impl AggregationOperator {
    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(x)
    }

    /// `self ∘ inner`: maps through `inner` first.
    pub fn compose(&self, inner: &AggregationOperator) -> Result<AggregationOperator> {
        Ok(AggregationOperator {
            matrix: self.matrix.matmul(&inner.matrix)?,
            mode: self.mode,
            provenance: format!("{} ∘ {}", self.provenance, inner.provenance),
        })
    }
}

fn membership_operator(
    n_sites: usize,
    regions: &[Region],
    mode: AggregationMode,
    provenance: &str,
) -> Result<AggregationOperator> {
    let mut rows = Vec::with_capacity(regions.len());
    for r in regions {
        if r.members.is_empty() {
            return invalid(format!("region `{}` has no integration points", r.id));
        }
        if !(r.measure > 0.0) {
            return invalid(format!("region `{}` has non-positive measure", r.id));
        }
        let mut members = r.members.clone();
        members.sort_unstable();
        members.dedup();
        if let Some(&bad) = members.iter().find(|&&m| m >= n_sites) {
            return invalid(format!("region `{}` references site {bad} of {n_sites}", r.id));
        }
        let w = match mode {
            AggregationMode::Mean => 1.0 / members.len() as f64,
            AggregationMode::Total => 1.0,
        };
        let mut row: Vec<(usize, f64)> = members.into_iter().map(|m| (m, w)).collect();
        if mode == AggregationMode::Mean && row.len() > 1 {
            // last weight absorbs rounding so the row sums to exactly one
            let k = row.len() - 1;
            let head: f64 = row[..k].iter().map(|e| e.1).sum();
            row[k].1 = 1.0 - head;
        }
        rows.push(row);
    }
    Ok(AggregationOperator { matrix: SparseRows::from_rows(n_sites, rows)?, mode, provenance: provenance.into() })
}

/// Regional mean or total of a field over lattice sites.
pub fn build_areal_operator(n_sites: usize, regions: &[Region], mode: AggregationMode) -> Result<AggregationOperator> {
    membership_operator(n_sites, regions, mode, "areal")
}

/// Aggregation over the time points falling in each closed interval `[t1, t2]`.
pub fn build_interval_operator(timeline: &[f64], intervals: &[(f64, f64)], mode: AggregationMode) -> Result<AggregationOperator> {
    if timeline.windows(2).any(|w| !(w[0] < w[1])) {
        return invalid("timeline must be strictly increasing");
    }
    let mut regions = Vec::with_capacity(intervals.len());
    for (k, &(t1, t2)) in intervals.iter().enumerate() {
        if !(t1 < t2) {
            return invalid(format!("interval {k} has t1 >= t2"));
        }
        let members: Vec<usize> = (0..timeline.len()).filter(|&i| timeline[i] >= t1 && timeline[i] <= t2).collect();
        if members.is_empty() {
            return invalid(format!("interval {k} [{t1}, {t2}] contains no time points"));
        }
        regions.push(Region::new(k.to_string(), members).with_measure(t2 - t1));
    }
    membership_operator(timeline.len(), &regions, mode, "interval")
}

/// Aggregation over space-time voxels; site `t * n_space + s` is cell `s` at time `t`.
pub fn build_voxel_operator(n_space: usize, n_time: usize, voxels: &[Region], mode: AggregationMode) -> Result<AggregationOperator> {
    let n = n_space
        .checked_mul(n_time)
        .ok_or_else(|| LgmError::Overflow("space-time site count".into()))?;
    membership_operator(n, voxels, mode, "voxel")
}

/// Voxel membership from a spatial region and a set of time indices.
pub fn voxel(id: impl Into<String>, cells: &[usize], times: &[usize], n_space: usize) -> Region {
    let members = times.iter().flat_map(|&t| cells.iter().map(move |&s| t * n_space + s)).collect();
    Region::new(id, members)
}

/// Disjoint groups of fine categorical levels with per-member weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalGrouping {
    pub n_levels: usize,
    pub groups: Vec<Vec<usize>>,
    /// `weights[g][i]` for member `i` of group `g`; absent means balanced (unit) weights.
    #[serde(default)]
    pub weights: Option<Vec<Vec<f64>>>,
}

impl CategoricalGrouping {
    pub fn balanced(n_levels: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let g = Self { n_levels, groups, weights: None };
        g.validate()?;
        Ok(g)
    }

    pub fn weighted(n_levels: usize, groups: Vec<Vec<usize>>, weights: Vec<Vec<f64>>) -> Result<Self> {
        let g = Self { n_levels, groups, weights: Some(weights) };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.n_levels];
        for (k, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                return invalid(format!("group {k} is empty"));
            }
            for &l in g {
                if l >= self.n_levels {
                    return invalid(format!("group {k} references level {l} of {}", self.n_levels));
                }
                if seen[l] {
                    return invalid(format!("level {l} belongs to more than one group"));
                }
                seen[l] = true;
            }
        }
        if let Some(w) = &self.weights {
            if w.len() != self.groups.len() {
                return invalid("one weight vector per group is required");
            }
            for (k, (g, wk)) in self.groups.iter().zip(w).enumerate() {
                if g.len() != wk.len() {
                    return invalid(format!("group {k} has {} members but {} weights", g.len(), wk.len()));
                }
                if wk.iter().any(|v| !(*v >= 0.0)) || (wk.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return invalid(format!("weights of group {k} must be non-negative and sum to one"));
                }
            }
        }
        Ok(())
    }
}

/// Row per group: unit entries for balanced groupings (sum), the weights otherwise.
pub fn build_categorical_operator(grouping: &CategoricalGrouping) -> Result<AggregationOperator> {
    grouping.validate()?;
    let rows = grouping
        .groups
        .iter()
        .enumerate()
        .map(|(k, g)| {
            g.iter()
                .enumerate()
                .map(|(i, &l)| (l, grouping.weights.as_ref().map_or(1.0, |w| w[k][i])))
                .collect()
        })
        .collect();
    let mode = if grouping.weights.is_some() { AggregationMode::Mean } else { AggregationMode::Total };
    Ok(AggregationOperator { matrix: SparseRows::from_rows(grouping.n_levels, rows)?, mode, provenance: "categorical".into() })
}

/// Coarse predictors as measure-weighted averages of the fine predictors they contain.
/// `parent[k]` is the coarse region containing fine region `k`.
pub fn nested_areal_weights(fine_measures: &[f64], coarse_measures: &[f64], parent: &[usize]) -> Result<AggregationOperator> {
    if parent.len() != fine_measures.len() {
        return Err(LgmError::DimensionMismatch { context: "containment map", expected: fine_measures.len(), found: parent.len() });
    }
    if fine_measures.iter().chain(coarse_measures).any(|m| !(*m > 0.0)) {
        return invalid("region measures must be positive");
    }
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); coarse_measures.len()];
    let mut total = vec![0.0; coarse_measures.len()];
    for (k, &p) in parent.iter().enumerate() {
        if p >= coarse_measures.len() {
            return invalid(format!("fine region {k} assigned to unknown coarse region {p}"));
        }
        rows[p].push((k, fine_measures[k] / coarse_measures[p]));
        total[p] += fine_measures[k];
    }
    for (j, (&t, &c)) in total.iter().zip(coarse_measures).enumerate() {
        if (t - c).abs() > 1e-9 * c.max(1.0) {
            return invalid(format!("coarse region {j}: fine measures sum to {t}, expected {c}"));
        }
    }
    Ok(AggregationOperator {
        matrix: SparseRows::from_rows(fine_measures.len(), rows)?,
        mode: AggregationMode::Mean,
        provenance: "nested_areal".into(),
    })
}

/// Precision of the expert error covariance `Σ_ii = 1/τ_i`, `Σ_ij = ρ_ij / √(τ_i τ_j)`.
/// `rhos` lists the upper-triangle pairs row by row.
pub fn build_expert_covariance(taus: &[f64], rhos: &[f64]) -> Result<DMatrix<f64>> {
    let m = taus.len();
    if m == 0 || rhos.len() != m * (m - 1) / 2 {
        return invalid("expert covariance needs m precisions and m(m-1)/2 correlations");
    }
    if taus.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return invalid("expert precisions must be positive");
    }
    let mut sigma = DMatrix::zeros(m, m);
    let mut k = 0;
    for i in 0..m {
        sigma[(i, i)] = 1.0 / taus[i];
        for j in i + 1..m {
            let v = rhos[k] / (taus[i] * taus[j]).sqrt();
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
            k += 1;
        }
    }
    let chol = sigma
        .cholesky()
        .ok_or_else(|| LgmError::InvalidInput("expert covariance is not positive definite".into()))?;
    let p = chol.inverse();
    Ok((&p + p.transpose()) * 0.5)
}

/// Regions from a `region_id,site_index` membership table and an optional
/// `region_id,measure` table. Regions keep their order of first appearance;
/// without a measure row the member count is used.
pub fn parse_regions(membership: &str, measures: Option<&str>) -> Result<Vec<Region>> {
    let mut regions: Vec<Region> = Vec::new();
    for (k, line) in membership.lines().enumerate() {
        let Some((id, site)) = split_pair(line, k, "site_index")? else { continue };
        let Ok(site) = site.parse::<usize>() else {
            return invalid(format!("malformed membership line `{line}`"));
        };
        match regions.iter_mut().find(|r| r.id == id) {
            Some(r) => r.members.push(site),
            None => regions.push(Region::new(id, vec![site])),
        }
    }
    for r in &mut regions {
        r.measure = r.members.len() as f64;
    }
    if let Some(m) = measures {
        for (k, line) in m.lines().enumerate() {
            let Some((id, v)) = split_pair(line, k, "measure")? else { continue };
            let Ok(v) = v.parse::<f64>() else {
                return invalid(format!("malformed measure line `{line}`"));
            };
            let Some(r) = regions.iter_mut().find(|r| r.id == id) else {
                return invalid(format!("measure given for unknown region `{id}`"));
            };
            r.measure = v;
        }
    }
    Ok(regions)
}

pub fn load_regions(membership: impl AsRef<Path>, measures: Option<&Path>) -> Result<Vec<Region>> {
    let m = std::fs::read_to_string(membership)?;
    let v = measures.map(std::fs::read_to_string).transpose()?;
    parse_regions(&m, v.as_deref())
}

fn split_pair<'a>(line: &'a str, k: usize, header: &str) -> Result<Option<(&'a str, &'a str)>> {
    let line = line.trim();
    if line.is_empty() {
        return Ok(None);
    }
    let Some((a, b)) = line.split_once(',') else {
        return invalid(format!("expected two columns, found `{line}`"));
    };
    let (a, b) = (a.trim(), b.trim());
    if k == 0 && a == "region_id" && b == header {
        return Ok(None);
    }
    Ok(Some((a, b)))
}

/// How a secondary source's predictor relates to the shared latent field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaBinding {
    Fixed(f64),
    Hyper(String),
}

/// Correlated expert term: this source is member `source` of the MVN block `block`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertLink {
    pub block: String,
    pub source: usize,
    pub taus: Vec<String>,
    pub rhos: Vec<String>,
    pub n_replicates: usize,
    /// Replicate (e.g. region) of each observation row.
    pub replicate_of_row: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedPredictorSpec {
    /// Map from the primary latent field to the fine-scale shared predictor.
    pub shared: SparseRows,
    pub alpha: AlphaBinding,
    /// Precision hyperparameter of an iid residual per observation.
    #[serde(default)]
    pub residual: Option<String>,
    #[serde(default)]
    pub expert: Option<ExpertLink>,
}

/// A secondary source: observations (whose own design holds any unshared terms),
/// the aggregation from fine predictor points to observation rows, and how the
/// shared predictor enters.
#[derive(Debug, Clone)]
pub struct SecondarySource {
    pub block: ObservationBlock,
    pub operator: AggregationOperator,
    pub spec: SharedPredictorSpec,
}

/// Extends `primary` with secondary sources whose predictors are `α · O · A_shared x`
/// plus optional residual and correlated expert terms appended to the latent field.
pub fn assemble_joint_model(primary: &ModelAssembly, sources: Vec<SecondarySource>) -> Result<ModelAssembly> {
    let n0 = primary.n_latent();
    let mut blocks: Vec<LatentBlockSpec> = primary.blocks().to_vec();
    let mut extra = 0usize;
    // (block name, offset) of appended blocks
    let mut mvn_offsets: Vec<(String, usize, ExpertLink)> = Vec::new();
    let mut residual_offsets = Vec::with_capacity(sources.len());
    for (j, s) in sources.iter().enumerate() {
        if s.operator.nrows() != s.block.len() {
            return Err(LgmError::DimensionMismatch { context: "operator rows", expected: s.block.len(), found: s.operator.nrows() });
        }
        if s.spec.shared.ncols() != n0 || s.operator.ncols() != s.spec.shared.nrows() {
            return invalid(format!("source {j}: operator and shared map do not compose onto the primary field"));
        }
        if s.block.ncols() != n0 {
            return Err(LgmError::DimensionMismatch { context: "secondary design columns", expected: n0, found: s.block.ncols() });
        }
        if let AlphaBinding::Hyper(name) = &s.spec.alpha {
            primary.hyper().index_of(name)?;
        }
        residual_offsets.push(s.spec.residual.as_ref().map(|p| {
            let off = n0 + extra;
            blocks.push(LatentBlockSpec::new(
                format!("residual_{j}"),
                BlockKind::Iid { n: s.block.len(), precision: p.clone() },
            ));
            extra += s.block.len();
            off
        }));
        if let Some(e) = &s.spec.expert {
            if e.replicate_of_row.len() != s.block.len() || e.replicate_of_row.iter().any(|&r| r >= e.n_replicates) {
                return invalid(format!("source {j}: expert replicate map is inconsistent"));
            }
            if e.source >= e.taus.len() {
                return invalid(format!("source {j}: expert index out of range"));
            }
            match mvn_offsets.iter().find(|(n, _, _)| n == &e.block) {
                Some((_, _, first)) => {
                    if first.taus != e.taus || first.rhos != e.rhos || first.n_replicates != e.n_replicates {
                        return invalid(format!("expert block `{}` is declared inconsistently", e.block));
                    }
                }
                None => {
                    let off = n0 + extra;
                    let kind = BlockKind::MvnDense {
                        m: e.taus.len(),
                        replicates: e.n_replicates,
                        taus: e.taus.clone(),
                        rhos: e.rhos.clone(),
                    };
                    extra += kind.size();
                    blocks.push(LatentBlockSpec::new(e.block.clone(), kind));
                    mvn_offsets.push((e.block.clone(), off, e.clone()));
                }
            }
        }
    }
    let n = n0 + extra;

    let mut observations: Vec<ObservationBlock> = primary
        .observations()
        .iter()
        .map(|o| pad_block(o, n))
        .collect::<Result<_>>()?;
    for (j, s) in sources.into_iter().enumerate() {
        let mapped = s.operator.matrix.matmul(&s.spec.shared)?;
        let mut block = pad_block(&s.block, n)?;
        let mut own: Vec<Vec<(usize, f64)>> = (0..block.len()).map(|r| block.design.row(r).collect()).collect();
        if let Some(off) = residual_offsets[j] {
            for (r, row) in own.iter_mut().enumerate() {
                row.push((off + r, 1.0));
            }
        }
        if let Some(e) = &s.spec.expert {
            let off = mvn_offsets.iter().find(|(b, _, _)| b == &e.block).unwrap().1;
            let m = e.taus.len();
            for (r, row) in own.iter_mut().enumerate() {
                row.push((off + e.replicate_of_row[r] * m + e.source, 1.0));
            }
        }
        let shared = mapped.embed(0, n)?;
        match &s.spec.alpha {
            AlphaBinding::Fixed(a) => {
                block.design = SparseRows::from_rows(n, own)?.add(&shared.scaled(*a))?;
                block.scaled_design = None;
            }
            AlphaBinding::Hyper(name) => {
                block.design = SparseRows::from_rows(n, own)?;
                block = block.with_scaled_design(name.clone(), shared)?;
            }
        }
        observations.push(block);
    }
    ModelAssembly::new(blocks, observations, primary.hyper().clone())
}

fn pad_block(o: &ObservationBlock, n: usize) -> Result<ObservationBlock> {
    let mut b = o.clone();
    b.design = o.design.embed(0, n)?;
    if let Some(s) = &mut b.scaled_design {
        s.design = s.design.embed(0, n)?;
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn areal_rows() {
        let op = build_areal_operator(6, &[Region::new("a", vec![2]), Region::new("b", vec![0, 1, 3, 4])], AggregationMode::Mean)
            .unwrap();
        assert_eq!(op.matrix.row(0).collect::<Vec<_>>(), vec![(2, 1.0)]);
        assert_eq!(op.matrix.row_values(1), &[0.25; 4]);
        assert!(build_areal_operator(6, &[Region::new("e", vec![])], AggregationMode::Mean).is_err());
        assert!(build_areal_operator(6, &[Region::new("o", vec![6])], AggregationMode::Mean).is_err());
    }

    #[test]
    fn interval_rows() {
        let t: Vec<f64> = (0..8).map(f64::from).collect();
        let op = build_interval_operator(&t, &[(2.5, 5.0), (4.0, 6.5)], AggregationMode::Mean).unwrap();
        assert_eq!(op.matrix.row_cols(0), &[3, 4, 5]);
        assert!(op.matrix.row_values(0).iter().all(|v| (*v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(op.matrix.row_cols(1), &[4, 5, 6]);
        let tot = build_interval_operator(&t, &[(2.5, 5.0)], AggregationMode::Total).unwrap();
        assert_eq!(tot.matrix.row_values(0), &[1.0, 1.0, 1.0]);
        assert!(build_interval_operator(&t, &[(2.1, 2.9)], AggregationMode::Mean).is_err());
    }

    #[test]
    fn voxel_rows() {
        let op = build_voxel_operator(4, 3, &[voxel("v", &[1, 2], &[0, 1], 4)], AggregationMode::Mean).unwrap();
        assert_eq!(op.matrix.row_cols(0), &[1, 2, 5, 6]);
        assert_eq!(op.matrix.row_values(0), &[0.25; 4]);
    }

    #[test]
    fn categorical_rows() {
        let g = CategoricalGrouping::balanced(5, vec![vec![0, 1, 2], vec![3], vec![4]]).unwrap();
        let op = build_categorical_operator(&g).unwrap();
        assert_eq!(op.matrix.to_dense().row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(op.matrix.row(1).collect::<Vec<_>>(), vec![(3, 1.0)]);
        assert!(CategoricalGrouping::balanced(5, vec![vec![0, 1], vec![1]]).is_err());
        assert!(CategoricalGrouping::weighted(3, vec![vec![0, 1]], vec![vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn nested_weights() {
        let op = nested_areal_weights(&[1.0, 3.0], &[4.0], &[0, 0]).unwrap();
        assert_eq!(op.matrix.row_values(0), &[0.25, 0.75]);
        assert!(nested_areal_weights(&[1.0, 2.0], &[4.0], &[0, 0]).is_err());
    }

    #[test]
    fn regions_from_csv() {
        let r = parse_regions("region_id,site_index\na,3\nb,0\na,4\n", Some("region_id,measure\na,2.5\n")).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].members, vec![3, 4]);
        assert_eq!(r[0].measure, 2.5);
        assert_eq!(r[1].measure, 1.0);
        assert!(parse_regions("a;1\n", None).is_err());
        assert!(parse_regions("a,1\n", Some("c,2\n")).is_err());
    }

    #[test]
    fn expert_precision_blocks() {
        let p = build_expert_covariance(&[1.0, 1.0], &[0.0]).unwrap();
        assert!((p - DMatrix::identity(2, 2)).norm() < 1e-14);
        let p = build_expert_covariance(&[1.0, 1.0], &[0.5]).unwrap();
        let e = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.0]) / 0.75;
        assert!((p - e).norm() < 1e-14);
        assert!(build_expert_covariance(&[1.0, 1.0], &[1.0]).is_err());
    }
}
