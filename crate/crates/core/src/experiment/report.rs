use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mean_sd, MetricsReport, METRIC_NAMES};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const TRIALS_FILE: &str = "hpo_trials.csv";

/// One evaluated (experiment, model, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    /// Model label; sweep settings are appended as `@key=value`.
    pub model: String,
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvResult {
    pub experiment: String,
    pub model: String,
    pub seed: u64,
    pub accuracy: f64,
    pub auroc: f64,
    pub f1: f64,
    pub precision: f64,
}

impl From<&ResultRow> for CsvResult {
    fn from(r: &ResultRow) -> Self {
        CsvResult {
            experiment: r.experiment.clone(),
            model: r.model.clone(),
            seed: r.seed,
            accuracy: r.metrics.accuracy,
            auroc: r.metrics.macro_auroc,
            f1: r.metrics.macro_f1,
            precision: r.metrics.macro_precision,
        }
    }
}

impl CsvResult {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "auroc" => Some(self.auroc),
            "f1" => Some(self.f1),
            "precision" => Some(self.precision),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub model: String,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub y: f64,
    pub series: String,
    pub seed: u64,
}

/// One HPO trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub trial: usize,
    pub val_loss: f64,
    pub best_epoch: usize,
    /// Sampled hyperparameters as JSON.
    pub params: String,
}

/// Splits `name@key=value` into `(name, key, value)`.
pub fn parse_sweep_label(model: &str) -> Option<(&str, &str, f64)> {
    let (series, setting) = model.split_once('@')?;
    let (key, value) = setting.split_once('=')?;
    Some((series, key, value.parse().ok()?))
}

fn write_rows<S: Serialize>(path: &Path, rows: &[S], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let csv_rows: Vec<CsvResult> = rows.iter().map(CsvResult::from).collect();
    write_rows(
        path,
        &csv_rows,
        &["experiment", "model", "seed", "accuracy", "auroc", "f1", "precision"],
    )
}

pub fn read_results(path: &Path) -> Result<Vec<CsvResult>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_trials(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    write_rows(path, trials, &["seed", "trial", "val_loss", "best_epoch", "params"])
}

/// Mean and sample sd per (experiment, model, metric), keeping first-seen order.
pub fn summarize(rows: &[CsvResult]) -> Result<Vec<SummaryRow>> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&CsvResult>> = BTreeMap::new();
    for r in rows {
        let key = (r.experiment.clone(), r.model.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let mut out = Vec::new();
    for key in order {
        let group = &groups[&key];
        if group.len() == 1 {
            log::warn!("{} / {}: a single seed, sd reported as 0", key.0, key.1);
        }
        for name in METRIC_NAMES {
            let values: Vec<f64> = group.iter().map(|r| r.metric(name).unwrap()).collect();
            let m = mean_sd(&values)?;
            out.push(SummaryRow {
                experiment: key.0.clone(),
                model: key.1.clone(),
                metric: name.to_string(),
                mean: m.mean,
                sd: m.sd,
            });
        }
    }
    Ok(out)
}

/// Accuracy of every sweep row as a long-format point.
pub fn sweep_points(rows: &[CsvResult]) -> Vec<SweepPoint> {
    rows.iter()
        .filter_map(|r| {
            let (series, key, x) = parse_sweep_label(&r.model)?;
            Some(SweepPoint {
                x,
                y: r.accuracy,
                series: format!("{series}@{key}"),
                seed: r.seed,
            })
        })
        .collect()
}

/// Reads `results.csv` in `dir` and writes `summary.csv`, plus `sweep.csv`
/// when any row belongs to a sweep.
pub fn emit_report(dir: &Path) -> Result<Vec<SummaryRow>> {
    let path = dir.join(RESULTS_FILE);
    if !path.is_file() {
        return Err(Error::Config(format!("no {} in {}", RESULTS_FILE, dir.display())));
    }
    let rows = read_results(&path)?;
    let summary = summarize(&rows)?;
    write_rows(
        &dir.join(SUMMARY_FILE),
        &summary,
        &["experiment", "model", "metric", "mean", "sd"],
    )?;
    let points = sweep_points(&rows);
    if !points.is_empty() {
        write_rows(&dir.join(SWEEP_FILE), &points, &["x", "y", "series", "seed"])?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, seed: u64, acc: f64) -> CsvResult {
        CsvResult {
            experiment: "e".into(),
            model: model.into(),
            seed,
            accuracy: acc,
            auroc: 0.5,
            f1: 0.4,
            precision: 0.3,
        }
    }

    #[test]
    fn two_seeds_give_one_group() {
        let s = summarize(&[row("m", 0, 0.7), row("m", 1, 0.8)]).unwrap();
        assert_eq!(s.len(), METRIC_NAMES.len());
        assert!((s[0].mean - 0.75).abs() < 1e-12);
        assert!((s[0].sd - 0.0707106781).abs() < 1e-9);
    }

    #[test]
    fn sweep_labels() {
        assert_eq!(parse_sweep_label("ftt+mtr@pm=0.45"), Some(("ftt+mtr", "pm", 0.45)));
        assert_eq!(parse_sweep_label("ftt"), None);
        let rows: Vec<CsvResult> = (0..5)
            .flat_map(|i| (0..3).map(move |s| row(&format!("x@pm={}", i as f64 / 4.0), s, 0.5)))
            .collect();
        assert_eq!(sweep_points(&rows).len(), 15);
    }
}
