//! Regression and derived classification metrics: MAE, Pearson
//! correlation, binary accuracy/F1 at threshold 0, and three-class
//! accuracy/F1 with bucket edges at ±0.5. F1 scores are support-weighted.

use serde::Serialize;

use crate::error::{CoreError, Result};

/// Three-class bucket edges on the label scale.
pub const BUCKET_EDGE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub mae: f64,
    pub corr: f64,
    pub acc2: f64,
    /// Weighted binary F1.
    pub f1: f64,
    pub acc3: f64,
    /// Weighted three-class F1.
    pub f13: f64,
}

impl MetricReport {
    /// CSV fragment in the metric-column order of the log header.
    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.mae, self.corr, self.acc2, self.f1, self.acc3, self.f13
        )
    }
}

/// Pearson correlation; returns 1 for identical inputs and 0 when either
/// side is constant (correlation undefined).
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Binary class: positive iff value > 0.
fn class2(v: f64) -> usize {
    usize::from(v > 0.0)
}

/// Three-class bucket: 0 negative (≤ −edge), 1 neutral, 2 positive (≥ edge).
fn class3(v: f64) -> usize {
    if v <= -BUCKET_EDGE {
        0
    } else if v >= BUCKET_EDGE {
        2
    } else {
        1
    }
}

/// Support-weighted F1 over `n_classes` classes given per-item class ids.
fn weighted_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> f64 {
    let n = truth.len() as f64;
    let mut f1_sum = 0.0;
    for c in 0..n_classes {
        let tp = pred
            .iter()
            .zip(truth)
            .filter(|&(&p, &t)| p == c && t == c)
            .count() as f64;
        let fp = pred
            .iter()
            .zip(truth)
            .filter(|&(&p, &t)| p == c && t != c)
            .count() as f64;
        let fnn = pred
            .iter()
            .zip(truth)
            .filter(|&(&p, &t)| p != c && t == c)
            .count() as f64;
        let support = tp + fnn;
        if support == 0.0 {
            continue;
        }
        let f1 = if tp == 0.0 {
            0.0
        } else {
            let prec = tp / (tp + fp);
            let rec = tp / (tp + fnn);
            2.0 * prec * rec / (prec + rec)
        };
        f1_sum += f1 * support / n;
    }
    f1_sum
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|&(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// All metrics from regression predictions and labels.
pub fn compute_metrics(preds: &[f64], labels: &[f64]) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(CoreError::EmptyInput("compute_metrics"));
    }
    if preds.len() != labels.len() {
        return Err(CoreError::ShapeMismatch {
            op: "compute_metrics",
            expected: vec![labels.len()],
            found: vec![preds.len()],
        });
    }
    let mae = preds
        .iter()
        .zip(labels)
        .map(|(&p, &l)| (p - l).abs())
        .sum::<f64>()
        / preds.len() as f64;
    let corr = pearson(preds, labels);
    let p2: Vec<usize> = preds.iter().map(|&v| class2(v)).collect();
    let t2: Vec<usize> = labels.iter().map(|&v| class2(v)).collect();
    let p3: Vec<usize> = preds.iter().map(|&v| class3(v)).collect();
    let t3: Vec<usize> = labels.iter().map(|&v| class3(v)).collect();
    Ok(MetricReport {
        mae,
        corr,
        acc2: accuracy(&p2, &t2),
        f1: weighted_f1(&p2, &t2, 2),
        acc3: accuracy(&p3, &t3),
        f13: weighted_f1(&p3, &t3, 3),
    })
}
