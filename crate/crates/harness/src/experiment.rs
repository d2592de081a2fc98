//! Paired runs of the full, recursive and consensus methods on one dataset.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use lgm_core::consensus::{sequential_consensus_fit, ConsensusConfig, PartitionFit};
use lgm_core::laplace::output::write_summary;
use lgm_core::laplace::{fit, fit_on_grid, HyperGrid, PosteriorSummary};
use lgm_core::recursive::{fit_recursive, DriftDiagnostics, RecursiveConfig};
use serde::{Deserialize, Serialize};

use crate::alloc;
use crate::config::{ExperimentConfig, Method, Variant};
use crate::dataset::{write_dataset, Dataset, Truth};
use crate::error::{HarnessError, Result};
use crate::recipe::{build_model, Built};
use crate::simulate::simulate;

pub const REPORT_FILE: &str = "report.json";
pub const SCHEMA_VERSION: u32 = 1;

/// Data, truth (when simulated), the model and the partition rows of one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Dataset,
    pub truth: Option<Truth>,
    pub built: Built,
    pub partitions: Option<Vec<Vec<usize>>>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (data, truth) = match &cfg.data {
        Some(path) => (Dataset::load(path)?, None),
        None => {
            let (d, t) = simulate(&cfg.scenario, cfg.seed)?;
            (d, Some(t))
        }
    };
    let built = build_model(&cfg.scenario, &data, cfg.variant)?;
    let partitions = cfg.partition_rule()?.map(|r| r.apply(&data, cfg.seed)).transpose()?;
    Ok(Prepared { data, truth, built, partitions })
}

/// Result of one method.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub summary: PosteriorSummary,
    /// Support points with their final log densities (absent for consensus).
    pub grid: Option<HyperGrid>,
    pub drift: Option<DriftDiagnostics>,
    pub trace_csv: Option<String>,
    pub partition_fits: Option<Vec<PartitionFit>>,
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: Method,
    pub run: std::result::Result<MethodRun, HarnessError>,
    pub wall_clock_seconds: f64,
    pub peak_memory_bytes: Option<usize>,
}

fn partition_blocks(prepared: &Prepared) -> Result<Vec<Vec<lgm_core::likelihood::ObservationBlock>>> {
    match &prepared.partitions {
        Some(p) => Ok(prepared.built.partition_blocks(p)),
        None => Err(HarnessError::Validation("this method needs a partition rule".into())),
    }
}

fn execute(method: Method, cfg: &ExperimentConfig, prepared: &Prepared) -> Result<MethodRun> {
    let model = &prepared.built.model;
    match method {
        Method::Full => {
            let out = fit(model, &cfg.engine)?;
            Ok(MethodRun { summary: out.summary, grid: Some(out.grid), drift: None, trace_csv: None, partition_fits: None })
        }
        Method::Recursive => {
            let parts = partition_blocks(prepared)?;
            let rc = RecursiveConfig { engine: cfg.engine, boundary_threshold: cfg.boundary_threshold };
            let (summary, state) = fit_recursive(model, parts, &rc)?;
            Ok(MethodRun {
                summary,
                grid: Some(state.grid.clone()),
                drift: Some(state.mode_shift_diagnostic()),
                trace_csv: Some(state.trace_csv()),
                partition_fits: None,
            })
        }
        Method::Consensus => {
            let parts = partition_blocks(prepared)?;
            let cc = ConsensusConfig { engine: cfg.engine, mode: cfg.consensus_mode };
            let (summary, fits) = sequential_consensus_fit(model, parts, &cc)?;
            Ok(MethodRun { summary, grid: None, drift: None, trace_csv: None, partition_fits: Some(fits) })
        }
    }
}

/// Runs one method, timing it and tracking its peak heap use.
pub fn run_method(method: Method, cfg: &ExperimentConfig, prepared: &Prepared) -> MethodOutcome {
    let started = Instant::now();
    let (run, peak) = alloc::measure(|| execute(method, cfg, prepared));
    MethodOutcome { method, run, wall_clock_seconds: started.elapsed().as_secs_f64(), peak_memory_bytes: peak }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperReport {
    pub name: String,
    pub natural_mode: f64,
    pub natural_mean: f64,
    pub natural_sd: f64,
    pub internal_mode: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub status: String,
    pub error: Option<String>,
    pub wall_clock_seconds: f64,
    pub peak_memory_bytes: Option<usize>,
    pub log_marginal_likelihood: Option<f64>,
    pub n_support_points: Option<usize>,
    pub hyper: Vec<HyperReport>,
    pub warnings: Vec<String>,
    pub drift: Option<DriftDiagnostics>,
}

impl MethodReport {
    fn from_outcome(o: &MethodOutcome) -> Self {
        match &o.run {
            Ok(r) => Self {
                status: "ok".into(),
                error: None,
                wall_clock_seconds: o.wall_clock_seconds,
                peak_memory_bytes: o.peak_memory_bytes,
                log_marginal_likelihood: Some(r.summary.log_marginal_likelihood),
                n_support_points: Some(r.summary.n_support_points),
                hyper: hyper_reports(&r.summary),
                warnings: r.summary.warnings.clone(),
                drift: r.drift.clone(),
            },
            Err(e) => Self {
                status: "failed".into(),
                error: Some(e.to_string()),
                wall_clock_seconds: o.wall_clock_seconds,
                peak_memory_bytes: o.peak_memory_bytes,
                log_marginal_likelihood: None,
                n_support_points: None,
                hyper: vec![],
                warnings: vec![],
                drift: None,
            },
        }
    }
}

pub fn hyper_reports(s: &PosteriorSummary) -> Vec<HyperReport> {
    s.hyper_marginals
        .iter()
        .map(|h| HyperReport {
            name: h.name.clone(),
            natural_mode: h.natural_mode,
            natural_mean: h.natural_mean,
            natural_sd: h.natural_sd,
            internal_mode: h.internal_mode,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperDifference {
    pub name: String,
    pub reference_mode: f64,
    pub other_mode: f64,
    /// `|other − reference| / |reference|` on the natural scale.
    pub relative_difference: f64,
}

/// Differences of one method against the full fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub mean_difference: Vec<f64>,
    pub sd_difference: Vec<f64>,
    pub max_abs_mean_difference: f64,
    /// `max_i |Δmean_i| / sd_i` with the reference sd.
    pub max_standardized_mean_difference: f64,
    pub rms_standardized_mean_difference: f64,
    pub max_abs_sd_difference: f64,
    pub hyper: Vec<HyperDifference>,
    pub max_relative_hyper_mode_difference: f64,
}

pub fn compare_summaries(reference: &PosteriorSummary, other: &PosteriorSummary) -> Comparison {
    let (rm, rs) = (reference.latent_means(), reference.latent_sds());
    let (om, os) = (other.latent_means(), other.latent_sds());
    let mean_difference: Vec<f64> = om.iter().zip(&rm).map(|(a, b)| a - b).collect();
    let sd_difference: Vec<f64> = os.iter().zip(&rs).map(|(a, b)| a - b).collect();
    let std: Vec<f64> = mean_difference.iter().zip(&rs).map(|(d, s)| d.abs() / s.max(1e-300)).collect();
    let max = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let hyper: Vec<HyperDifference> = reference
        .hyper_marginals
        .iter()
        .filter_map(|h| {
            other.hyper(&h.name).map(|o| HyperDifference {
                name: h.name.clone(),
                reference_mode: h.natural_mode,
                other_mode: o.natural_mode,
                relative_difference: (o.natural_mode - h.natural_mode).abs() / h.natural_mode.abs().max(1e-300),
            })
        })
        .collect();
    Comparison {
        max_abs_mean_difference: max(&mean_difference),
        max_standardized_mean_difference: max(&std),
        rms_standardized_mean_difference: (std.iter().map(|v| v * v).sum::<f64>() / std.len().max(1) as f64).sqrt(),
        max_abs_sd_difference: max(&sd_difference),
        max_relative_hyper_mode_difference: hyper.iter().fold(0.0, |m, h| m.max(h.relative_difference)),
        hyper,
        mean_difference,
        sd_difference,
    }
}

/// Per-support-point gap between the recursive and the full-data log densities, after removing
/// their mean difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub recursive_log_density: Vec<f64>,
    pub full_log_density: Vec<f64>,
    pub per_point: Vec<f64>,
    pub max_abs: f64,
}

pub fn log_density_discrepancy(recursive: &[f64], full: &[f64]) -> Discrepancy {
    let n = recursive.len().max(1) as f64;
    let shift = recursive.iter().zip(full).map(|(a, b)| a - b).sum::<f64>() / n;
    let per_point: Vec<f64> = recursive.iter().zip(full).map(|(a, b)| a - b - shift).collect();
    Discrepancy {
        max_abs: per_point.iter().fold(0.0, |m, v| m.max(v.abs())),
        recursive_log_density: recursive.to_vec(),
        full_log_density: full.to_vec(),
        per_point,
    }
}

/// Full-data log densities on the recursive support points.
pub fn recursive_discrepancy(prepared: &Prepared, cfg: &ExperimentConfig, recursive_grid: &HyperGrid) -> Result<Discrepancy> {
    let full = fit_on_grid(&prepared.built.model, recursive_grid, &cfg.engine)?;
    Ok(log_density_discrepancy(&recursive_grid.log_density, &full.grid.log_density))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthMetric {
    pub rmse: f64,
    /// Share of nodes whose truth lies in the central 95% interval (mean ± 1.96 sd).
    pub coverage_95: Option<f64>,
}

/// Truth recovery for each truth component that names a latent block, plus the
/// `predictor` (`beta0 + field`) when both are present.
pub fn truth_metrics(built: &Built, summary: &PosteriorSummary, truth: &Truth) -> BTreeMap<String, TruthMetric> {
    let means = summary.latent_means();
    let sds = summary.latent_sds();
    let mut out = BTreeMap::new();
    for b in built.model.blocks() {
        let Some(t) = truth.get(&b.name) else { continue };
        let Ok(r) = built.model.block_range(&b.name) else { continue };
        if t.len() != r.len() {
            continue;
        }
        let m = &means[r.clone()];
        let s = &sds[r];
        let rmse = (m.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len() as f64).sqrt();
        let covered = (0..t.len()).filter(|&i| (t[i] - m[i]).abs() <= 1.96 * s[i]).count();
        out.insert(b.name.clone(), TruthMetric { rmse, coverage_95: Some(covered as f64 / t.len() as f64) });
    }
    if let (Some(p), Ok(b0), Ok(f)) = (truth.get("predictor"), built.model.block_range("beta0"), built.model.block_range("field")) {
        if p.len() == f.len() {
            let rmse = (f.clone().zip(&p).map(|(i, t)| (means[b0.start] + means[i] - t).powi(2)).sum::<f64>() / p.len() as f64).sqrt();
            out.insert("predictor".into(), TruthMetric { rmse, coverage_95: None });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSections<T> {
    pub full: Option<T>,
    pub recursive: Option<T>,
    pub consensus: Option<T>,
}

impl<T> Default for MethodSections<T> {
    fn default() -> Self {
        Self { full: None, recursive: None, consensus: None }
    }
}

impl<T> MethodSections<T> {
    fn slot(&mut self, m: Method) -> &mut Option<T> {
        match m {
            Method::Full => &mut self.full,
            Method::Recursive => &mut self.recursive,
            Method::Consensus => &mut self.consensus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparisons {
    pub recursive_vs_full: Option<Comparison>,
    pub consensus_vs_full: Option<Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub variant: Variant,
    pub method: MethodReport,
    pub truth: Option<BTreeMap<String, TruthMetric>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub name: String,
    pub scenario: String,
    pub seed: u64,
    pub variant: Variant,
    pub partitions: Option<String>,
    pub n_partitions: Option<usize>,
    pub n_observations: usize,
    pub n_latent: usize,
    pub hyper_names: Vec<String>,
    pub methods: MethodSections<MethodReport>,
    pub comparisons: Comparisons,
    pub discrepancy: Option<Discrepancy>,
    pub truth: MethodSections<BTreeMap<String, TruthMetric>>,
    pub baselines: Vec<BaselineReport>,
}

impl ComparisonReport {
    /// Copy with wall-clock and memory fields zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for m in [&mut r.methods.full, &mut r.methods.recursive, &mut r.methods.consensus].into_iter().flatten() {
            m.wall_clock_seconds = 0.0;
            m.peak_memory_bytes = None;
        }
        for b in &mut r.baselines {
            b.method.wall_clock_seconds = 0.0;
            b.method.peak_memory_bytes = None;
        }
        r
    }

    pub fn failed_methods(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for (name, m) in [("full", &self.methods.full), ("recursive", &self.methods.recursive), ("consensus", &self.methods.consensus)] {
            if m.as_ref().is_some_and(|m| m.status != "ok") {
                out.push(name);
            }
        }
        out
    }
}

/// Checks the JSON shape of a report: every required key is present (possibly `null`).
pub fn validate_report_json(v: &serde_json::Value) -> Result<()> {
    let fail = |msg: String| Err(HarnessError::Validation(format!("report schema: {msg}")));
    let top = [
        "schema_version",
        "name",
        "scenario",
        "seed",
        "variant",
        "partitions",
        "n_partitions",
        "n_observations",
        "n_latent",
        "hyper_names",
        "methods",
        "comparisons",
        "discrepancy",
        "truth",
        "baselines",
    ];
    let Some(obj) = v.as_object() else { return fail("not an object".into()) };
    for k in top {
        if !obj.contains_key(k) {
            return fail(format!("missing key `{k}`"));
        }
    }
    if obj["schema_version"] != SCHEMA_VERSION {
        return fail("unsupported schema version".into());
    }
    for section in ["methods", "truth"] {
        for m in ["full", "recursive", "consensus"] {
            if !obj[section].as_object().is_some_and(|o| o.contains_key(m)) {
                return fail(format!("`{section}` lacks `{m}`"));
            }
        }
    }
    for k in ["recursive_vs_full", "consensus_vs_full"] {
        if !obj["comparisons"].as_object().is_some_and(|o| o.contains_key(k)) {
            return fail(format!("`comparisons` lacks `{k}`"));
        }
    }
    for m in ["full", "recursive", "consensus"] {
        let s = &obj["methods"][m];
        if s.is_null() {
            continue;
        }
        for k in ["status", "error", "wall_clock_seconds", "peak_memory_bytes", "log_marginal_likelihood", "hyper"] {
            if s.get(k).is_none() {
                return fail(format!("method `{m}` lacks `{k}`"));
            }
        }
    }
    Ok(())
}

/// Everything produced by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: ComparisonReport,
    pub prepared: Prepared,
    pub outcomes: Vec<MethodOutcome>,
}

/// Runs the configured methods one after another, then the baselines, and assembles the report.
/// When `out` is given, writes the dataset, every method's outputs and `report.json`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutput> {
    let prepared = prepare(cfg)?;
    if let (Some(dir), Some(t)) = (out, &prepared.truth) {
        write_dataset(dir, &prepared.data, t)?;
    }
    let mut outcomes = Vec::new();
    let mut methods = MethodSections::default();
    let mut truth = MethodSections::default();
    for &m in &cfg.methods {
        let o = run_method(m, cfg, &prepared);
        log::info!("{}: {:.2}s", m.as_str(), o.wall_clock_seconds);
        *methods.slot(m) = Some(MethodReport::from_outcome(&o));
        if let Ok(r) = &o.run {
            if let Some(t) = &prepared.truth {
                *truth.slot(m) = Some(truth_metrics(&prepared.built, &r.summary, t));
            }
            if let Some(dir) = out {
                let d = dir.join(m.as_str());
                write_summary(&d, &r.summary)?;
                if let Some(trace) = &r.trace_csv {
                    std::fs::write(d.join(lgm_core::recursive::TRACE_FILE), trace)?;
                }
                if let Some(f) = &r.partition_fits {
                    std::fs::write(d.join("partitions.json"), serde_json::to_string_pretty(f)?)?;
                }
            }
        }
        outcomes.push(o);
    }
    let find = |m: Method| outcomes.iter().find(|o| o.method == m).and_then(|o| o.run.as_ref().ok());
    let full = find(Method::Full);
    let comparisons = Comparisons {
        recursive_vs_full: full.zip(find(Method::Recursive)).map(|(f, r)| compare_summaries(&f.summary, &r.summary)),
        consensus_vs_full: full.zip(find(Method::Consensus)).map(|(f, c)| compare_summaries(&f.summary, &c.summary)),
    };
    let discrepancy = match find(Method::Recursive).and_then(|r| r.grid.as_ref()) {
        Some(g) => match recursive_discrepancy(&prepared, cfg, g) {
            Ok(d) => Some(d),
            Err(e) => {
                log::warn!("discrepancy run failed: {e}");
                None
            }
        },
        None => None,
    };

    let mut baselines = Vec::new();
    for &v in &cfg.baselines {
        let mut bc = cfg.clone();
        bc.variant = v;
        let b = match build_model(&cfg.scenario, &prepared.data, v) {
            Ok(b) => b,
            Err(e) => {
                baselines.push(BaselineReport { variant: v, method: failed_report(&e), truth: None });
                continue;
            }
        };
        let bp = Prepared { built: b, ..prepared.clone() };
        let o = run_method(Method::Full, &bc, &bp);
        let truth = match (&o.run, &bp.truth) {
            (Ok(r), Some(t)) => Some(truth_metrics(&bp.built, &r.summary, t)),
            _ => None,
        };
        if let (Some(dir), Ok(r)) = (out, &o.run) {
            write_summary(&dir.join(format!("baseline_{}", v.as_str())), &r.summary)?;
        }
        baselines.push(BaselineReport { variant: v, method: MethodReport::from_outcome(&o), truth });
    }

    let report = ComparisonReport {
        schema_version: SCHEMA_VERSION,
        name: cfg.name.clone(),
        scenario: cfg.scenario.kind().into(),
        seed: cfg.seed,
        variant: cfg.variant,
        partitions: cfg.partitions.clone(),
        n_partitions: prepared.partitions.as_ref().map(|p| prepared.built.partition_blocks(p).len()),
        n_observations: prepared.built.model.n_observations(),
        n_latent: prepared.built.model.n_latent(),
        hyper_names: prepared.built.model.hyper().free_names(),
        methods,
        comparisons,
        discrepancy,
        truth,
        baselines,
    };
    let json = serde_json::to_value(&report)?;
    validate_report_json(&json)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&json)?)?;
    }
    Ok(ExperimentOutput { report, prepared, outcomes })
}

fn failed_report(e: &HarnessError) -> MethodReport {
    MethodReport {
        status: "failed".into(),
        error: Some(e.to_string()),
        wall_clock_seconds: 0.0,
        peak_memory_bytes: None,
        log_marginal_likelihood: None,
        n_support_points: None,
        hyper: vec![],
        warnings: vec![],
        drift: None,
    }
}
