//! Long-format observation tables and simulation truth.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DATA_FILE: &str = "dataset.csv";
pub const TRUTH_FILE: &str = "truth.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub source: usize,
    pub response: f64,
    pub site: Option<usize>,
    pub time: Option<usize>,
    /// Categorical level, or region index for areal sources.
    pub level: Option<usize>,
    /// Observation precision scale.
    pub phi: Option<f64>,
}

impl Record {
    pub fn new(source: usize, response: f64) -> Self {
        Self { source, response, site: None, time: None, level: None, phi: None }
    }

    pub fn site(mut self, s: usize) -> Self {
        self.site = Some(s);
        self
    }

    pub fn time(mut self, t: usize) -> Self {
        self.time = Some(t);
        self
    }

    pub fn level(mut self, l: usize) -> Self {
        self.level = Some(l);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Row indices of `source`, in table order.
    pub fn rows_of(&self, source: usize) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].source == source).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| crate::error::HarnessError::Validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let records = r.deserialize().collect::<std::result::Result<Vec<Record>, _>>()?;
        Ok(Self { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    /// Checks every record against index bounds and the expected source count.
    pub fn check(&self, n_sources: usize, n_sites: Option<usize>, n_times: Option<usize>, n_levels: &[usize]) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.source >= n_sources {
                return invalid(format!("row {i}: unknown source {}", r.source));
            }
            if !r.response.is_finite() {
                return invalid(format!("row {i}: response is not finite"));
            }
            if let (Some(s), Some(n)) = (r.site, n_sites) {
                if s >= n {
                    return invalid(format!("row {i}: site {s} outside the lattice of {n}"));
                }
            }
            if let (Some(t), Some(n)) = (r.time, n_times) {
                if t >= n {
                    return invalid(format!("row {i}: time {t} outside the timeline of {n}"));
                }
            }
            if let (Some(l), Some(&n)) = (r.level, n_levels.get(r.source)) {
                if l >= n {
                    return invalid(format!("row {i}: level {l} outside the {n} levels of source {}", r.source));
                }
            }
            if let Some(p) = r.phi {
                if !(p > 0.0 && p.is_finite()) {
                    return invalid(format!("row {i}: precision scale must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub component: String,
    pub index: usize,
    pub value: f64,
}

/// Named ground-truth vectors (latent blocks, hyperparameters).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Truth {
    pub entries: Vec<TruthEntry>,
}

impl Truth {
    pub fn push(&mut self, component: &str, values: &[f64]) {
        for (index, &value) in values.iter().enumerate() {
            self.entries.push(TruthEntry { component: component.into(), index, value });
        }
    }

    pub fn get(&self, component: &str) -> Option<Vec<f64>> {
        let mut v: Vec<(usize, f64)> = self.entries.iter().filter(|e| e.component == component).map(|e| (e.index, e.value)).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by_key(|e| e.0);
        Some(v.into_iter().map(|e| e.1).collect())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e)?;
        }
        let bytes = w.into_inner().map_err(|e| crate::error::HarnessError::Validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let entries = r.deserialize().collect::<std::result::Result<Vec<TruthEntry>, _>>()?;
        Ok(Self { entries })
    }
}

pub fn write_dataset(dir: &Path, data: &Dataset, truth: &Truth) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(DATA_FILE), data.to_csv()?)?;
    std::fs::write(dir.join(TRUTH_FILE), truth.to_csv()?)?;
    Ok(())
}
