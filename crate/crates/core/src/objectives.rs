//! Training objectives for the three sibling networks and their combination,
//! plus the poly learning-rate schedule.
//!
//! Probability-level functions mirror the loss definitions directly. The
//! `*_from_logits` variants return per-sample gradients with respect to the
//! pre-activation logits and are what the trainers use.

use serde::{Deserialize, Serialize};

use crate::data_model::{LabelKind, LabelVector};
use crate::error::{DarError, Result};

pub const DEFAULT_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the counterfactual term.
    pub mu: f64,
    /// Weight of the low-reliability term.
    pub delta: f64,
    /// Floor applied to probabilities inside the log.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { mu: 0.5, delta: 0.5, eps: DEFAULT_EPS }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.delta >= 0.0) {
            return Err(DarError::Config(format!("mu={} delta={} must be >= 0", self.mu, self.delta)));
        }
        if !(self.eps > 0.0 && self.eps <= 1e-3) {
            return Err(DarError::Config(format!("eps={} must lie in (0, 1e-3]", self.eps)));
        }
        Ok(())
    }
}

#[inline]
fn clamped_ln(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0).ln()
}

fn check_batch(pred: usize, labels: usize) -> Result<()> {
    if pred == labels {
        Ok(())
    } else {
        Err(DarError::BatchMismatch { pred, labels })
    }
}

/// Mean cross-entropy of probability vectors against one-hot labels.
pub fn loss_prd(pred: &[Vec<f64>], labels: &[LabelVector], eps: f64) -> Result<f64> {
    check_batch(pred.len(), labels.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, y) in pred.iter().zip(labels) {
        if y.kind != LabelKind::OneHot {
            return Err(DarError::WrongKind { expected: "onehot", found: kind_name(y.kind) });
        }
        if p.len() != y.q() {
            return Err(DarError::ShapeMismatch(format!("prediction length {} vs Q={}", p.len(), y.q())));
        }
        total -= p.iter().zip(&y.values).map(|(&pi, &yi)| if yi != 0.0 { yi * clamped_ln(pi, eps) } else { 0.0 }).sum::<f64>();
    }
    Ok(total / pred.len() as f64)
}

/// Cross-entropy on the single-rater subset; same form as [`loss_prd`].
pub fn loss_lr(pred: &[Vec<f64>], labels: &[LabelVector], eps: f64) -> Result<f64> {
    loss_prd(pred, labels, eps)
}

fn kind_name(k: LabelKind) -> &'static str {
    match k {
        LabelKind::OneHot => "onehot",
        LabelKind::Candidate => "candidate",
        LabelKind::Complement => "complement",
    }
}

/// Counterfactual loss: `-(1/N) sum (1 - candidate) . log(pred)` over
/// independent sigmoid outputs. Candidate classes contribute nothing.
pub fn loss_cf(pred: &[Vec<f64>], candidates: &[LabelVector], eps: f64) -> Result<f64> {
    check_batch(pred.len(), candidates.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, c) in pred.iter().zip(candidates) {
        if c.kind != LabelKind::Candidate {
            return Err(DarError::WrongKind { expected: "candidate", found: kind_name(c.kind) });
        }
        if p.len() != c.q() {
            return Err(DarError::ShapeMismatch(format!("prediction length {} vs Q={}", p.len(), c.q())));
        }
        total -= p.iter().zip(&c.values).map(|(&pi, &ci)| if ci == 0.0 { clamped_ln(pi, eps) } else { 0.0 }).sum::<f64>();
    }
    Ok(total / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DarLoss {
    #[serde(rename = "L_prd")]
    pub prd: f64,
    #[serde(rename = "L_cf")]
    pub cf: f64,
    #[serde(rename = "L_lr")]
    pub lr: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

impl DarLoss {
    pub fn combine(prd: f64, cf: f64, lr: f64, cfg: &LossConfig) -> Self {
        Self { prd, cf, lr, total: prd + cfg.mu * cf + cfg.delta * lr }
    }

    pub fn add_scaled(&mut self, other: &DarLoss, s: f64) {
        self.prd += s * other.prd;
        self.cf += s * other.cf;
        self.lr += s * other.lr;
        self.total += s * other.total;
    }
}

/// Fine-tuning objective on consistent labels. The counterfactual head is
/// scored against the complement of each one-hot (its `Q - 1` wrong classes).
pub fn loss_dar(
    y_prd: &[Vec<f64>],
    y_cf: &[Vec<f64>],
    y_lr: &[Vec<f64>],
    labels: &[LabelVector],
    cfg: &LossConfig,
) -> Result<DarLoss> {
    check_batch(y_cf.len(), labels.len())?;
    check_batch(y_lr.len(), labels.len())?;
    let prd = loss_prd(y_prd, labels, cfg.eps)?;
    let lr = loss_lr(y_lr, labels, cfg.eps)?;
    let as_candidates: Vec<LabelVector> =
        labels.iter().map(|l| LabelVector { values: l.values.clone(), kind: LabelKind::Candidate }).collect();
    let cf = loss_cf(y_cf, &as_candidates, cfg.eps)?;
    Ok(DarLoss::combine(prd, cf, lr, cfg))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-sample softmax cross-entropy for a 1-based class, with logit gradient.
pub fn ce_from_logits(logits: &[f64], class: usize, eps: f64) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let t = class - 1;
    let loss = -clamped_ln(p[t], eps);
    let grad = if p[t] > eps {
        p.iter().enumerate().map(|(i, &pi)| pi - if i == t { 1.0 } else { 0.0 }).collect()
    } else {
        vec![0.0; p.len()]
    };
    (loss, grad)
}

/// Per-sample counterfactual loss over sigmoid outputs; `candidate[i] != 0`
/// marks classes excluded from the loss.
pub fn cf_from_logits(logits: &[f64], candidate: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, (&z, &c)) in logits.iter().zip(candidate).enumerate() {
        if c != 0.0 {
            continue;
        }
        let s = sigmoid(z);
        loss -= clamped_ln(s, eps);
        if s > eps {
            grad[i] = -(1.0 - s);
        }
    }
    (loss, grad)
}

pub struct DarGradients {
    pub prd: Vec<f64>,
    pub cf: Vec<f64>,
    pub lr: Vec<f64>,
}

/// Per-sample fine-tuning loss from the three heads' logits.
pub fn dar_from_logits(
    prd: &[f64],
    cf: &[f64],
    lr: &[f64],
    class: usize,
    cfg: &LossConfig,
) -> (DarLoss, DarGradients) {
    let (lp, gp) = ce_from_logits(prd, class, cfg.eps);
    let mut onehot = vec![0.0; cf.len()];
    onehot[class - 1] = 1.0;
    let (lc, gc) = cf_from_logits(cf, &onehot, cfg.eps);
    let (ll, gl) = ce_from_logits(lr, class, cfg.eps);
    let grads = DarGradients {
        prd: gp,
        cf: gc.into_iter().map(|g| cfg.mu * g).collect(),
        lr: gl.into_iter().map(|g| cfg.delta * g).collect(),
    };
    (DarLoss::combine(lp, lc, ll, cfg), grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr0: f64,
    pub total_steps: usize,
    pub power: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || self.total_steps == 0 || !(self.power > 0.0) {
            return Err(DarError::Config(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }
}

/// `lr0 * (1 - t/T)^power`.
pub fn poly_lr(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(DarError::StepOutOfRange { step, total: cfg.total_steps });
    }
    let frac = 1.0 - step as f64 / cfg.total_steps as f64;
    Ok(cfg.lr0 * frac.powf(cfg.power))
}
