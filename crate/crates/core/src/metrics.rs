//! Classification metrics: accuracy, macro recall / F1, one-vs-rest ROC AUC.

use serde::{Deserialize, Serialize};

use crate::error::{DarError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// 1-based.
    pub class: usize,
    pub support: usize,
    pub predicted: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the class is absent or the test set has no negatives.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: usize,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[t][p]` counts truth `t + 1` predicted as `p + 1`.
    pub confusion: Vec<Vec<usize>>,
    pub roc: Vec<RocCurve>,
    pub warnings: Vec<String>,
}

/// Index of the largest score, lowest index on ties; 1-based.
pub fn argmax_class(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best + 1
}

/// ROC of `scores` for `positive[i]`, one point per distinct threshold.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Vec<(f64, f64)> {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((if n_neg > 0.0 { fp / n_neg } else { 0.0 }, if n_pos > 0.0 { tp / n_pos } else { 0.0 }));
    }
    points
}

pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Scores each prediction (per-class probabilities or any per-class scores)
/// against 1-based truth.
pub fn evaluate(scores: &[Vec<f64>], truth: &[usize], q: usize) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(DarError::EmptyTestSet);
    }
    if scores.len() != truth.len() {
        return Err(DarError::BatchMismatch { pred: scores.len(), labels: truth.len() });
    }
    if let Some(s) = scores.iter().find(|s| s.len() != q) {
        return Err(DarError::ShapeMismatch(format!("score vector of length {} for Q={q}", s.len())));
    }
    if let Some(&t) = truth.iter().find(|&&t| t == 0 || t > q) {
        return Err(DarError::Config(format!("truth class {t} outside 1..={q}")));
    }
    let n = truth.len();
    let preds: Vec<usize> = scores.iter().map(|s| argmax_class(s)).collect();
    let mut confusion = vec![vec![0usize; q]; q];
    for (&t, &p) in truth.iter().zip(&preds) {
        confusion[t - 1][p - 1] += 1;
    }
    let correct: usize = (0..q).map(|c| confusion[c][c]).sum();
    let mut per_class = Vec::with_capacity(q);
    let mut roc = Vec::new();
    let mut warnings = Vec::new();
    let (mut rec_sum, mut f1_sum, mut auc_sum, mut present, mut auc_count) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for c in 0..q {
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..q).map(|t| confusion[t][c]).sum();
        let tp = confusion[c][c] as f64;
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let mut auc = None;
        if support == 0 {
            warnings.push(format!("class {} absent from ground truth; excluded from macro averages", c + 1));
        } else {
            present += 1;
            rec_sum += recall;
            f1_sum += f1;
            if support == n {
                warnings.push(format!("class {} has no negatives; AUC undefined and excluded", c + 1));
            } else {
                let s: Vec<f64> = scores.iter().map(|v| v[c]).collect();
                let pos: Vec<bool> = truth.iter().map(|&t| t == c + 1).collect();
                let points = roc_curve(&s, &pos);
                let a = trapezoid(&points);
                auc_sum += a;
                auc_count += 1;
                auc = Some(a);
                roc.push(RocCurve { class: c + 1, points });
            }
        }
        per_class.push(ClassMetrics { class: c + 1, support, predicted, precision, recall, f1, auc });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(MetricsReport {
        n,
        accuracy: correct as f64 / n as f64,
        macro_recall: rec_sum / present as f64,
        macro_f1: f1_sum / present as f64,
        macro_auc: if auc_count > 0 { auc_sum / auc_count as f64 } else { f64::NAN },
        per_class,
        confusion,
        roc,
        warnings,
    })
}
