//! Multiclass evaluation and aggregation across seeds.
//!
//! Zero-division rules: a class that is never predicted has precision 0, and
//! F1 is 0 when precision and recall are both 0. Macro precision and F1
//! average over the classes that occur in either the labels or the
//! predictions. AUROC averages over classes with at least one positive and
//! one negative; the others are skipped with a warning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Row = true class, column = predicted class.
pub fn confusion(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::dimension("confusion", &[y_true.len()], &[y_pred.len()]));
    }
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::Index(format!("label pair ({t}, {p}) out of range for {n_classes} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::Usage("accuracy of an empty set".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::dimension("accuracy", &[y_true.len()], &[y_pred.len()]));
    }
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y_true.len() as f64)
}

/// Precision, recall, F1 and support of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// `None` when the class has no positives or no negatives in the test set.
    pub auroc: Option<f64>,
}

fn per_class_prf(cm: &[Vec<usize>]) -> Vec<(f64, f64, f64, bool)> {
    let c = cm.len();
    (0..c)
        .map(|k| {
            let tp = cm[k][k] as f64;
            let support: usize = cm[k].iter().sum();
            let predicted: usize = (0..c).map(|r| cm[r][k]).sum();
            let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let r = if support == 0 { 0.0 } else { tp / support as f64 };
            let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            (p, r, f1, support > 0 || predicted > 0)
        })
        .collect()
}

/// `(macro_precision, macro_f1)`.
pub fn macro_precision_f1(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<(f64, f64)> {
    let cm = confusion(y_true, y_pred, n_classes)?;
    let rows: Vec<_> = per_class_prf(&cm).into_iter().filter(|r| r.3).collect();
    if rows.is_empty() {
        return Ok((0.0, 0.0));
    }
    let n = rows.len() as f64;
    Ok((
        rows.iter().map(|r| r.0).sum::<f64>() / n,
        rows.iter().map(|r| r.2).sum::<f64>() / n,
    ))
}

/// One-vs-rest AUROC of a single class from the rank-sum statistic, with
/// tied scores sharing their midpoint rank. `None` without both outcomes.
pub fn binary_auroc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

fn per_class_auroc(y_true: &[usize], scores: &Tensor<f64>) -> Result<Vec<Option<f64>>> {
    if scores.ndim() != 2 || scores.rows() != y_true.len() {
        return Err(Error::dimension("macro_auroc", scores.shape(), &[y_true.len()]));
    }
    let c = scores.cols();
    if let Some(&bad) = y_true.iter().find(|&&t| t >= c) {
        return Err(Error::Index(format!("label {bad} out of range for {c} score columns")));
    }
    Ok((0..c)
        .map(|k| {
            let pos: Vec<bool> = y_true.iter().map(|&t| t == k).collect();
            let col: Vec<f64> = (0..scores.rows()).map(|i| scores.at(i, k)).collect();
            binary_auroc(&pos, &col)
        })
        .collect())
}

pub fn macro_auroc(y_true: &[usize], scores: &Tensor<f64>) -> Result<f64> {
    let per = per_class_auroc(y_true, scores)?;
    let skipped: Vec<usize> = (0..per.len()).filter(|&k| per[k].is_none()).collect();
    let kept: Vec<f64> = per.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::MetricUndefined(
            "AUROC needs a class with both positive and negative samples".into(),
        ));
    }
    if !skipped.is_empty() {
        log::warn!("AUROC skips classes {skipped:?}: each lacks positives or negatives");
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// All metrics for one (experiment, model, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub n_test: usize,
    pub accuracy: f64,
    pub macro_auroc: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    /// Scores the arg-max predictions of `probs` (ties to the lowest class).
    pub fn from_probs(y_true: &[usize], probs: &Tensor<f64>, seed: u64) -> Result<Self> {
        let c = probs.cols();
        let y_pred = crate::training::argmax_rows(probs);
        let accuracy = accuracy(y_true, &y_pred)?;
        let (macro_precision, macro_f1) = macro_precision_f1(y_true, &y_pred, c)?;
        let macro_auroc = macro_auroc(y_true, probs)?;
        let cm = confusion(y_true, &y_pred, c)?;
        let aurocs = per_class_auroc(y_true, probs)?;
        let per_class = per_class_prf(&cm)
            .into_iter()
            .zip(aurocs)
            .enumerate()
            .map(|(k, ((p, r, f1, _), auroc))| ClassMetrics {
                class: k,
                precision: p,
                recall: r,
                f1,
                support: cm[k].iter().sum(),
                auroc,
            })
            .collect();
        Ok(MetricsReport {
            seed,
            n_test: y_true.len(),
            accuracy,
            macro_auroc,
            macro_f1,
            macro_precision,
            per_class,
        })
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "auroc" => Some(self.macro_auroc),
            "f1" => Some(self.macro_f1),
            "precision" => Some(self.macro_precision),
            _ => None,
        }
    }
}

pub const METRIC_NAMES: [&str; 4] = ["accuracy", "auroc", "f1", "precision"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

/// Mean and sample standard deviation of `values`.
pub fn mean_sd(values: &[f64]) -> Result<MeanSd> {
    if values.is_empty() {
        return Err(Error::Usage("mean of an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(MeanSd { mean, sd })
}

/// Mean ± sd per metric, in `METRIC_NAMES` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub n_seeds: usize,
    pub metrics: Vec<(String, MeanSd)>,
}

impl SeedSummary {
    pub fn get(&self, name: &str) -> Option<MeanSd> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

pub fn aggregate_seeds(reports: &[MetricsReport]) -> Result<SeedSummary> {
    if reports.is_empty() {
        return Err(Error::Usage("no reports to aggregate".into()));
    }
    if reports.len() == 1 {
        log::warn!("a single seed: standard deviation reported as 0");
    }
    let metrics = METRIC_NAMES
        .iter()
        .map(|&name| {
            let vals: Vec<f64> = reports.iter().map(|r| r.metric(name).unwrap()).collect();
            Ok((name.to_string(), mean_sd(&vals)?))
        })
        .collect::<Result<_>>()?;
    Ok(SeedSummary {
        n_seeds: reports.len(),
        metrics,
    })
}
