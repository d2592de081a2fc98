//! CSV/JSON serialization of posterior summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::json;

use super::fit::PosteriorSummary;
use crate::error::Result;

pub const LATENT_FILE: &str = "latent_marginals.csv";
pub const HYPER_FILE: &str = "hyper_marginals.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// One row per node: moments, 95% interval and the density grid (uniform on `grid_lo..=grid_hi`).
pub fn latent_csv(s: &PosteriorSummary) -> String {
    let n_grid = s.latent_marginals.first().map_or(0, |m| m.grid.x.len());
    let mut out = String::from("node,mean,sd,q025,q975,grid_lo,grid_hi");
    for j in 0..n_grid {
        let _ = write!(out, ",d{j}");
    }
    out.push('\n');
    for m in &s.latent_marginals {
        let g = &m.grid;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            m.node,
            m.mean,
            m.sd,
            g.quantile(0.025),
            g.quantile(0.975),
            g.x[0],
            g.x[g.x.len() - 1]
        );
        for d in &g.density {
            let _ = write!(out, ",{d}");
        }
        out.push('\n');
    }
    out
}

/// Long format: one row per (hyperparameter, scale, grid point).
pub fn hyper_csv(s: &PosteriorSummary) -> String {
    let mut out = String::from("name,scale,x,density\n");
    for h in &s.hyper_marginals {
        for (scale, g) in [("internal", &h.internal), ("natural", &h.natural)] {
            for (x, d) in g.x.iter().zip(&g.density) {
                let _ = writeln!(out, "{},{scale},{x},{d}", h.name);
            }
        }
    }
    out
}

pub fn summary_json(s: &PosteriorSummary) -> serde_json::Value {
    let hypers: Vec<_> = s
        .hyper_marginals
        .iter()
        .map(|h| {
            json!({
                "name": h.name,
                "transform": h.transform,
                "internal": {"mean": h.internal_mean, "sd": h.internal_sd, "mode": h.internal_mode},
                "natural": {
                    "mean": h.natural_mean, "sd": h.natural_sd, "mode": h.natural_mode,
                    "q025": h.natural_q025, "q50": h.natural_q50, "q975": h.natural_q975
                }
            })
        })
        .collect();
    json!({
        "method": s.method,
        "log_marginal_likelihood": s.log_marginal_likelihood,
        "mode": s.hyper_names.iter().zip(&s.mode).map(|(n, v)| (n.clone(), json!(v))).collect::<serde_json::Map<_, _>>(),
        "hyperparameters": hypers,
        "n_latent": s.latent_marginals.len(),
        "n_support_points": s.n_support_points,
        "newton_iterations": s.newton_iterations,
        "mode_search_iterations": s.mode_search_iterations,
        "runtime_seconds": s.runtime_seconds,
        "warnings": s.warnings,
    })
}

/// Writes the three summary files into `dir` (created if missing).
pub fn write_summary(dir: &Path, s: &PosteriorSummary) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(LATENT_FILE), latent_csv(s))?;
    fs::write(dir.join(HYPER_FILE), hyper_csv(s))?;
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary_json(s))?)?;
    Ok(())
}
