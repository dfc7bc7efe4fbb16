//! Plot-ready JSON built from the `metrics.csv` files under a directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use genni_core::training::{EpochMetrics, METRICS_HEADER};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::config::Cell;
use crate::error::{CliError, CliResult};

pub const PLOTS_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    #[serde(flatten)]
    pub metrics: EpochMetrics,
    /// Cumulative wall-clock seconds up to and including this epoch.
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    /// Path of the CSV relative to the scanned directory.
    pub source: String,
    /// Sweep coordinates from the sibling `cell.json`, when present.
    pub cell: Option<Cell>,
    pub points: Vec<PlotPoint>,
}

/// Series sharing one value of a sweep axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisGroup {
    pub value: f64,
    /// Indices into [`PlotData::series`].
    pub series: Vec<usize>,
    /// Mean over the group of each series' best validation NDCG@10.
    pub best_ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimePoint {
    pub series: usize,
    pub elapsed: f64,
    pub ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub format: u32,
    pub series: Vec<Series>,
    /// Groups per sweep axis (`alpha`, `beta`, `gamma`, `k`, `seed`); only
    /// axes taking more than one value appear.
    pub sweeps: BTreeMap<String, Vec<AxisGroup>>,
    pub time_vs_performance: Vec<TimePoint>,
    pub warnings: Vec<String>,
}

fn read_series(path: &Path) -> Result<Vec<EpochMetrics>, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let header = text.lines().next().unwrap_or("");
    if header != METRICS_HEADER {
        return Err(format!("unexpected header {header:?}"));
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let rows = reader
        .deserialize::<EpochMetrics>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    if rows.is_empty() {
        return Err("no rows".into());
    }
    Ok(rows)
}

fn read_cell(dir: &Path) -> Result<Option<Cell>, String> {
    let path = dir.join("cell.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map(Some).map_err(|e| format!("cell.json: {e}"))
}

fn axis_value(cell: &Cell, axis: &str) -> f64 {
    match axis {
        "alpha" => cell.alpha,
        "beta" => cell.beta,
        "gamma" => cell.gamma,
        "k" => cell.k as f64,
        _ => cell.seed as f64,
    }
}

/// Collects every `metrics.csv` below `dir`. Unreadable or malformed files
/// are skipped and listed in `warnings`.
pub fn export_plots(dir: &Path) -> CliResult<PlotData> {
    if !dir.is_dir() {
        return Err(CliError::Config(format!("{} is not a directory", dir.display())));
    }
    let mut warnings = Vec::new();
    let mut series = Vec::new();
    let mut found = 0;
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                warnings.push(e.to_string());
                continue;
            }
        };
        if !entry.file_type().is_file() || entry.file_name() != "metrics.csv" {
            continue;
        }
        found += 1;
        let path = entry.path();
        let source = path.strip_prefix(dir).unwrap_or(path).display().to_string();
        let rows = match read_series(path) {
            Ok(r) => r,
            Err(e) => {
                warnings.push(format!("skipped {source}: {e}"));
                continue;
            }
        };
        let cell = match read_cell(path.parent().unwrap_or(dir)) {
            Ok(c) => c,
            Err(e) => {
                warnings.push(format!("{source}: ignoring {e}"));
                None
            }
        };
        let mut elapsed = 0.0;
        let points = rows
            .into_iter()
            .map(|metrics| {
                elapsed += metrics.seconds;
                PlotPoint { metrics, elapsed }
            })
            .collect();
        series.push(Series { source, cell, points });
    }
    if found == 0 {
        return Err(CliError::Config(format!("no metrics.csv files under {}", dir.display())));
    }

    let mut sweeps = BTreeMap::new();
    for axis in ["alpha", "beta", "gamma", "k", "seed"] {
        let mut groups: Vec<AxisGroup> = Vec::new();
        for (i, s) in series.iter().enumerate() {
            let Some(cell) = &s.cell else { continue };
            let v = axis_value(cell, axis);
            match groups.iter_mut().find(|g| g.value == v) {
                Some(g) => g.series.push(i),
                None => groups.push(AxisGroup {
                    value: v,
                    series: vec![i],
                    best_ndcg10: 0.0,
                }),
            }
        }
        if groups.len() < 2 {
            continue;
        }
        groups.sort_by(|a, b| a.value.total_cmp(&b.value));
        for g in &mut groups {
            let best: f64 = g
                .series
                .iter()
                .map(|&i| series[i].points.iter().map(|p| p.metrics.ndcg10).fold(f64::NEG_INFINITY, f64::max))
                .sum();
            g.best_ndcg10 = best / g.series.len() as f64;
        }
        sweeps.insert(axis.to_string(), groups);
    }
    let time_vs_performance = series
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.points.iter().map(move |p| TimePoint {
                series: i,
                elapsed: p.elapsed,
                ndcg10: p.metrics.ndcg10,
            })
        })
        .collect();
    Ok(PlotData {
        format: PLOTS_FORMAT,
        series,
        sweeps,
        time_vs_performance,
        warnings,
    })
}
