//! Mini-batch training loop shared by every stage.
//!
//! A model exposes its parameter tensors and a per-sample loss with
//! gradients; [`fit`] handles the validation split, shuffling, online
//! augmentation, the poly schedule, Adam, best-checkpoint selection and early
//! stopping. All randomness is drawn from streams derived from one seed, and
//! the augmentation stream is keyed by sample index so every view of a
//! sample sees the same transform.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dar::{DarModel, Fusion, MvModel, Role, ViewNet};
use crate::data_model::{LabelKind, LabelVector};
use crate::error::{DarError, Result};
use crate::nn::Network;
use crate::objectives::{ce_from_logits, cf_from_logits, dar_from_logits, poly_lr, softmax, DarLoss, LossConfig, ScheduleConfig};
use crate::optim::{Adam, AdamConfig};
use crate::prep::AugmentParams;
use crate::seed::rng_for;
use crate::volume::{Patch, PatchTriplet, View};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    /// Learning rate for the 3Q -> Q fusion layer.
    pub lr_fusion: f64,
    pub adam: AdamConfig,
    pub schedule_power: f64,
    pub loss: LossConfig,
    /// First transferred block, 1-based; `None` scales the default to `m`.
    pub k: Option<usize>,
    pub m: usize,
    pub seed: u64,
    pub patience: usize,
    pub val_fraction: f64,
    pub augment: bool,
    /// Keep CF/LR parameters fixed while fine-tuning.
    pub freeze_siblings: bool,
    /// Fine-tune views and fusion together after fusion training.
    pub joint_mv: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 100,
            lr_pretrain: 1e-4,
            lr_finetune: 5e-5,
            lr_fusion: 1e-2,
            adam: AdamConfig::default(),
            schedule_power: 0.9,
            loss: LossConfig::default(),
            k: None,
            m: 6,
            seed: 0,
            patience: 10,
            val_fraction: 0.1,
            augment: true,
            freeze_siblings: false,
            joint_mv: false,
        }
    }
}

impl TrainConfig {
    /// Settings used for the synthetic experiments: 30 epochs with learning
    /// rates suited to a small network trained from scratch.
    pub fn desk() -> Self {
        Self { epochs: 30, lr_pretrain: 2e-3, lr_finetune: 5e-4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DarError::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return bad(format!("validation fraction {} outside (0, 0.5]", self.val_fraction));
        }
        for (name, lr) in [("lr_pretrain", self.lr_pretrain), ("lr_finetune", self.lr_finetune), ("lr_fusion", self.lr_fusion)] {
            if !(lr > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.m < 2 {
            return bad(format!("m must be >= 2, got {}", self.m));
        }
        if let Some(k) = self.k {
            if k == 0 || k > self.m + 1 {
                return bad(format!("k must lie in 1..={}", self.m + 1));
            }
        }
        self.loss.validate()
    }

    pub fn k(&self) -> usize {
        self.k.unwrap_or_else(|| crate::nn::default_k(self.m))
    }

    pub fn fit_options(&self, lr0: f64) -> FitOptions {
        FitOptions {
            lr0,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            val_fraction: self.val_fraction,
            seed: self.seed,
            augment: self.augment,
            adam: self.adam,
            power: self.schedule_power,
        }
    }
}

/// Inputs that can undergo the online flip/rotate augmentation.
pub trait Augment: Clone {
    fn augmented(&self, params: &AugmentParams) -> Self;
}

impl Augment for Patch {
    fn augmented(&self, params: &AugmentParams) -> Self {
        params.apply(self)
    }
}

impl Augment for PatchTriplet {
    fn augmented(&self, params: &AugmentParams) -> Self {
        self.map(|p| params.apply(p))
    }
}

/// Precomputed features are never augmented.
impl Augment for Vec<f64> {
    fn augmented(&self, _: &AugmentParams) -> Self {
        self.clone()
    }
}

pub trait Trainable {
    type Input: Augment;

    fn params_mut(&mut self) -> Vec<&mut Vec<f32>>;
    fn params(&self) -> Vec<&Vec<f32>>;
    /// Tensors the optimizer may update.
    fn trainable_mask(&self) -> Vec<bool>;
    /// Adds this sample's parameter gradients to `grads` and returns its loss.
    fn accumulate(&self, input: &Self::Input, target: &LabelVector, grads: &mut [Vec<f32>]) -> Result<DarLoss>;
    fn eval_loss(&self, input: &Self::Input, target: &LabelVector) -> Result<DarLoss>;

    fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    fn snapshot(&self) -> Vec<Vec<f32>> {
        self.params().into_iter().cloned().collect()
    }

    fn restore(&mut self, snapshot: &[Vec<f32>]) {
        for (p, s) in self.params_mut().into_iter().zip(snapshot) {
            p.copy_from_slice(s);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub augment: bool,
    pub adam: AdamConfig,
    pub power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: DarLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: DarLoss,
    pub val: DarLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n_train: usize,
    pub n_val: usize,
    pub total_steps: usize,
    pub steps: Vec<StepLog>,
    /// Entry 0 is the state before training.
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: DarLoss,
    pub stopped_early: bool,
}

/// Deterministic train/validation split: `max(1, round(n * fraction))`
/// indices go to validation.
pub fn split_train_val(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_val = ((n as f64 * fraction).round() as usize).max(1);
    if n < n_val + 1 {
        return Err(DarError::EmptySubset(format!("{n} samples leave nothing to train on after the validation split")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, "val-split", n as u64));
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    Ok((train, val))
}

fn mean_loss<M: Trainable>(model: &M, inputs: &[M::Input], targets: &[LabelVector], idx: &[usize]) -> Result<DarLoss> {
    let mut acc = DarLoss::default();
    for &i in idx {
        acc.add_scaled(&model.eval_loss(&inputs[i], &targets[i])?, 1.0 / idx.len() as f64);
    }
    Ok(acc)
}

/// Trains `model` in place and leaves it at the best-validation state.
pub fn fit<M: Trainable>(
    model: &mut M,
    inputs: &[M::Input],
    targets: &[LabelVector],
    opts: &FitOptions,
    mut on_step: Option<&mut dyn FnMut(&StepLog)>,
) -> Result<FitReport> {
    if inputs.len() != targets.len() {
        return Err(DarError::BatchMismatch { pred: inputs.len(), labels: targets.len() });
    }
    if inputs.is_empty() {
        return Err(DarError::EmptySubset("training set".into()));
    }
    let (train, val) = split_train_val(inputs.len(), opts.val_fraction, opts.seed)?;
    let batches_per_epoch = train.len().div_ceil(opts.batch_size);
    let schedule = ScheduleConfig { lr0: opts.lr0, total_steps: opts.epochs * batches_per_epoch, power: opts.power };
    schedule.validate()?;
    let mask = model.trainable_mask();
    let mut adam = Adam::new(opts.adam, model.params().iter().map(|p| p.len()));

    let initial = mean_loss(model, inputs, targets, &val)?;
    let mut best = (0usize, initial, model.snapshot());
    let mut report = FitReport {
        n_train: train.len(),
        n_val: val.len(),
        total_steps: schedule.total_steps,
        steps: Vec::with_capacity(schedule.total_steps),
        epochs: vec![EpochLog { epoch: 0, train: initial, val: initial }],
        best_epoch: 0,
        best_val: initial,
        stopped_early: false,
    };
    let mut step = 0usize;
    let mut order = train.clone();
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng_for(opts.seed, "shuffle", epoch as u64));
        let mut epoch_loss = DarLoss::default();
        for batch in order.chunks(opts.batch_size) {
            let lr = poly_lr(step, &schedule)?;
            let mut grads = model.zero_grads();
            let mut batch_loss = DarLoss::default();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let input = if opts.augment {
                    let params = AugmentParams::sample(&mut rng_for(opts.seed, "aug", ((epoch as u64) << 32) | i as u64));
                    Cow::Owned(inputs[i].augmented(&params))
                } else {
                    Cow::Borrowed(&inputs[i])
                };
                let l = model.accumulate(&input, &targets[i], &mut grads)?;
                batch_loss.add_scaled(&l, scale);
            }
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale as f32;
                }
            }
            adam.step(&mut model.params_mut(), &grads, &mask, lr);
            let log = StepLog { step, lr, loss: batch_loss };
            if let Some(cb) = on_step.as_deref_mut() {
                cb(&log);
            }
            report.steps.push(log);
            epoch_loss.add_scaled(&batch_loss, batch.len() as f64 / train.len() as f64);
            step += 1;
        }
        let v = mean_loss(model, inputs, targets, &val)?;
        report.epochs.push(EpochLog { epoch, train: epoch_loss, val: v });
        if v.total < best.1.total {
            best = (epoch, v, model.snapshot());
        } else if epoch - best.0 >= opts.patience {
            report.stopped_early = true;
            break;
        }
    }
    model.restore(&best.2);
    report.best_epoch = best.0;
    report.best_val = best.1;
    Ok(report)
}

fn logits_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn grad_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn require_class(target: &LabelVector) -> Result<usize> {
    if target.kind != LabelKind::OneHot {
        return Err(DarError::WrongKind { expected: "onehot", found: target.kind.name() });
    }
    target.class().ok_or_else(|| DarError::WrongKind { expected: "onehot", found: target.kind.name() })
}

/// One backbone trained with its role loss: cross-entropy for prd/lr,
/// the counterfactual loss for cf.
pub struct RoleNet {
    pub net: Network,
    pub role: Role,
    pub eps: f64,
}

impl RoleNet {
    fn role_loss(&self, logits: &[f32], target: &LabelVector) -> Result<(DarLoss, Vec<f64>)> {
        let z = logits_f64(logits);
        let (l, g) = match self.role {
            Role::Prd | Role::Lr => ce_from_logits(&z, require_class(target)?, self.eps),
            Role::Cf => {
                if target.kind != LabelKind::Candidate {
                    return Err(DarError::WrongKind { expected: "candidate", found: target.kind.name() });
                }
                cf_from_logits(&z, &target.values, self.eps)
            }
        };
        let mut loss = DarLoss { total: l, ..DarLoss::default() };
        match self.role {
            Role::Prd => loss.prd = l,
            Role::Cf => loss.cf = l,
            Role::Lr => loss.lr = l,
        }
        Ok((loss, g))
    }
}

impl Trainable for RoleNet {
    type Input = Patch;

    fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        self.net.params.iter_mut().collect()
    }

    fn params(&self) -> Vec<&Vec<f32>> {
        self.net.params.iter().collect()
    }

    fn trainable_mask(&self) -> Vec<bool> {
        vec![true; self.net.params.len()]
    }

    fn accumulate(&self, input: &Patch, target: &LabelVector, grads: &mut [Vec<f32>]) -> Result<DarLoss> {
        let tape = self.net.forward_tape(input)?;
        let (loss, g) = self.role_loss(&tape.logits, target)?;
        self.net.backward_tape(&tape, &grad_f32(&g), None, grads);
        Ok(loss)
    }

    fn eval_loss(&self, input: &Patch, target: &LabelVector) -> Result<DarLoss> {
        Ok(self.role_loss(&self.net.logits(input)?, target)?.0)
    }
}

/// DAR fine-tuning on consistent labels with the combined objective.
pub struct DarTrainer {
    pub model: DarModel,
    pub loss: LossConfig,
    pub freeze_siblings: bool,
}

impl Trainable for DarTrainer {
    type Input = Patch;

    fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let DarModel { prd, cf, lr, .. } = &mut self.model;
        prd.params.iter_mut().chain(cf.params.iter_mut()).chain(lr.params.iter_mut()).collect()
    }

    fn params(&self) -> Vec<&Vec<f32>> {
        let m = &self.model;
        m.prd.params.iter().chain(&m.cf.params).chain(&m.lr.params).collect()
    }

    fn trainable_mask(&self) -> Vec<bool> {
        let n = self.model.prd.params.len();
        let mut mask = vec![true; 3 * n];
        if self.freeze_siblings {
            mask[n..].fill(false);
        }
        mask
    }

    fn accumulate(&self, input: &Patch, target: &LabelVector, grads: &mut [Vec<f32>]) -> Result<DarLoss> {
        let class = require_class(target)?;
        let tape = self.model.forward_tape(input)?;
        let (loss, g) = dar_from_logits(
            &logits_f64(&tape.logits_prd),
            &logits_f64(&tape.cf.logits),
            &logits_f64(&tape.lr.logits),
            class,
            &self.loss,
        );
        let n = self.model.prd.params.len();
        let (gp, rest) = grads.split_at_mut(n);
        let (gc, gl) = rest.split_at_mut(n);
        let siblings = !self.freeze_siblings;
        self.model.backward_split(&tape, &grad_f32(&g.prd), &grad_f32(&g.cf), &grad_f32(&g.lr), gp, gc, gl, siblings);
        Ok(loss)
    }

    fn eval_loss(&self, input: &Patch, target: &LabelVector) -> Result<DarLoss> {
        let class = require_class(target)?;
        let tape = self.model.forward_tape(input)?;
        Ok(dar_from_logits(
            &logits_f64(&tape.logits_prd),
            &logits_f64(&tape.cf.logits),
            &logits_f64(&tape.lr.logits),
            class,
            &self.loss,
        )
        .0)
    }
}

/// The fusion layer alone, trained on precomputed per-view probabilities.
pub struct FusionTrainer {
    pub fusion: Fusion,
    pub eps: f64,
}

impl FusionTrainer {
    fn loss_grad(&self, concat: &[f64], target: &LabelVector) -> Result<(f64, Vec<f64>)> {
        let z = self.fusion.forward(concat)?;
        Ok(ce_from_logits(&z, require_class(target)?, self.eps))
    }
}

impl Trainable for FusionTrainer {
    type Input = Vec<f64>;

    fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        vec![&mut self.fusion.w, &mut self.fusion.b]
    }

    fn params(&self) -> Vec<&Vec<f32>> {
        vec![&self.fusion.w, &self.fusion.b]
    }

    fn trainable_mask(&self) -> Vec<bool> {
        vec![true, true]
    }

    fn accumulate(&self, input: &Vec<f64>, target: &LabelVector, grads: &mut [Vec<f32>]) -> Result<DarLoss> {
        let (l, g) = self.loss_grad(input, target)?;
        let q = self.fusion.q;
        let mut gw = vec![0.0; q * 3 * q];
        let mut gb = vec![0.0; q];
        self.fusion.backward(input, &g, &mut gw, &mut gb);
        for (d, s) in grads[0].iter_mut().zip(&gw) {
            *d += *s as f32;
        }
        for (d, s) in grads[1].iter_mut().zip(&gb) {
            *d += *s as f32;
        }
        Ok(DarLoss { prd: l, total: l, ..DarLoss::default() })
    }

    fn eval_loss(&self, input: &Vec<f64>, target: &LabelVector) -> Result<DarLoss> {
        let l = self.loss_grad(input, target)?.0;
        Ok(DarLoss { prd: l, total: l, ..DarLoss::default() })
    }
}

/// Whole multi-view model trained through the fused cross-entropy.
pub struct JointMvTrainer {
    pub mv: MvModel,
    pub eps: f64,
}

impl JointMvTrainer {
    fn view_params(net: &ViewNet) -> Vec<&Vec<f32>> {
        match net {
            ViewNet::Plain(n) => n.params.iter().collect(),
            ViewNet::Dar(d) => d.prd.params.iter().chain(&d.cf.params).chain(&d.lr.params).collect(),
        }
    }
}

impl Trainable for JointMvTrainer {
    type Input = PatchTriplet;

    fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let MvModel { views, fusion } = &mut self.mv;
        let mut out: Vec<&mut Vec<f32>> = Vec::new();
        for v in views.iter_mut() {
            match v {
                ViewNet::Plain(n) => out.extend(n.params.iter_mut()),
                ViewNet::Dar(d) => {
                    let DarModel { prd, cf, lr, .. } = d;
                    out.extend(prd.params.iter_mut().chain(cf.params.iter_mut()).chain(lr.params.iter_mut()));
                }
            }
        }
        out.push(&mut fusion.w);
        out.push(&mut fusion.b);
        out
    }

    fn params(&self) -> Vec<&Vec<f32>> {
        let mut out: Vec<&Vec<f32>> = self.mv.views.iter().flat_map(Self::view_params).collect();
        out.push(&self.mv.fusion.w);
        out.push(&self.mv.fusion.b);
        out
    }

    fn trainable_mask(&self) -> Vec<bool> {
        vec![true; self.params().len()]
    }

    fn accumulate(&self, input: &PatchTriplet, target: &LabelVector, grads: &mut [Vec<f32>]) -> Result<DarLoss> {
        let class = require_class(target)?;
        let q = self.mv.fusion.q;
        enum Tape {
            Plain(crate::nn::NetTape),
            Dar(Box<crate::dar::DarTape>),
        }
        let mut tapes = Vec::with_capacity(3);
        let mut probs = Vec::with_capacity(3);
        let mut concat = Vec::with_capacity(3 * q);
        for (view, net) in View::ALL.iter().zip(&self.mv.views) {
            let patch = input.view(*view);
            let (tape, logits) = match net {
                ViewNet::Plain(n) => {
                    let t = n.forward_tape(patch)?;
                    let l = t.logits.clone();
                    (Tape::Plain(t), l)
                }
                ViewNet::Dar(d) => {
                    let t = d.forward_tape(patch)?;
                    let l = t.logits_prd.clone();
                    (Tape::Dar(Box::new(t)), l)
                }
            };
            let p = softmax(&logits_f64(&logits));
            concat.extend_from_slice(&p);
            probs.push(p);
            tapes.push(tape);
        }
        let z = self.mv.fusion.forward(&concat)?;
        let (l, gz) = ce_from_logits(&z, class, self.eps);
        let mut gw = vec![0.0; q * 3 * q];
        let mut gb = vec![0.0; q];
        let gx = self.mv.fusion.backward(&concat, &gz, &mut gw, &mut gb);
        let mut offset = 0;
        for (v, (net, tape)) in self.mv.views.iter().zip(&tapes).enumerate() {
            let p = &probs[v];
            let gp = &gx[v * q..(v + 1) * q];
            let dot: f64 = gp.iter().zip(p).map(|(a, b)| a * b).sum();
            let glogit: Vec<f32> = p.iter().zip(gp).map(|(pi, gi)| (pi * (gi - dot)) as f32).collect();
            match (net, tape) {
                (ViewNet::Plain(n), Tape::Plain(t)) => {
                    let len = n.params.len();
                    n.backward_tape(t, &glogit, None, &mut grads[offset..offset + len]);
                    offset += len;
                }
                (ViewNet::Dar(d), Tape::Dar(t)) => {
                    let n = d.prd.params.len();
                    let (gp, rest) = grads[offset..offset + 3 * n].split_at_mut(n);
                    let (gc, gl) = rest.split_at_mut(n);
                    let zeros = vec![0.0f32; q];
                    d.backward_split(t, &glogit, &zeros, &zeros, gp, gc, gl, true);
                    offset += 3 * n;
                }
                _ => unreachable!("tape kind follows the view kind"),
            }
        }
        for (d, s) in grads[offset].iter_mut().zip(&gw) {
            *d += *s as f32;
        }
        for (d, s) in grads[offset + 1].iter_mut().zip(&gb) {
            *d += *s as f32;
        }
        Ok(DarLoss { prd: l, total: l, ..DarLoss::default() })
    }

    fn eval_loss(&self, input: &PatchTriplet, target: &LabelVector) -> Result<DarLoss> {
        let z = self.mv.mv_forward(input)?;
        let l = ce_from_logits(&z, require_class(target)?, self.eps).0;
        Ok(DarLoss { prd: l, total: l, ..DarLoss::default() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BackboneSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob_patch(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Patch {
        let r = 1.5 + 2.0 * class as f32 + rng.gen_range(-0.3..0.3);
        let c = (size as f32 - 1.0) / 2.0;
        let data = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f32 - c, (i % size) as f32 - c);
                let d = (x * x + y * y).sqrt();
                (r - d + 0.5).clamp(0.0, 1.0) + rng.gen_range(-0.02..0.02)
            })
            .collect();
        Patch { size, data }
    }

    fn toy_set(n: usize, seed: u64) -> (Vec<Patch>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes: Vec<usize> = (0..n).map(|i| i % 2 + 1).collect();
        let patches = classes.iter().map(|&c| blob_patch(c, 12, &mut rng)).collect();
        (patches, classes)
    }

    fn toy_spec() -> BackboneSpec {
        BackboneSpec { m: 2, channels: vec![4, 4], strides: vec![2, 2], input_size: 12, q: 2 }
    }

    fn opts(epochs: usize, lr0: f64) -> FitOptions {
        TrainConfig { epochs, batch_size: 32, seed: 5, ..TrainConfig::desk() }.fit_options(lr0)
    }

    #[test]
    fn split_counts() {
        let (t, v) = split_train_val(32, 0.1, 1).unwrap();
        assert_eq!((t.len(), v.len()), (29, 3));
        let (t, v) = split_train_val(2, 0.1, 1).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
        assert!(split_train_val(1, 0.1, 1).is_err());
    }

    #[test]
    fn one_epoch_step_count() {
        let (x, y) = toy_set(32, 1);
        let labels: Vec<LabelVector> = y.iter().map(|&c| LabelVector::onehot(c, 2)).collect();
        let mut m = RoleNet { net: Network::init(&toy_spec(), 1).unwrap(), role: Role::Prd, eps: 1e-7 };
        let mut seen = 0;
        let mut cb = |_: &StepLog| seen += 1;
        let r = fit(&mut m, &x, &labels, &opts(1, 1e-3), Some(&mut cb)).unwrap();
        assert_eq!(r.steps.len(), (28.8f64 / 32.0).ceil() as usize);
        assert_eq!(seen, 1);
        let json = serde_json::to_value(r.steps[0]).unwrap();
        for key in ["step", "lr", "L_prd", "L_cf", "L_lr", "L_total"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn identical_seeds_identical_params() {
        let (x, y) = toy_set(40, 2);
        let labels: Vec<LabelVector> = y.iter().map(|&c| LabelVector::onehot(c, 2)).collect();
        let run = || {
            let mut m = RoleNet { net: Network::init(&toy_spec(), 3).unwrap(), role: Role::Prd, eps: 1e-7 };
            fit(&mut m, &x, &labels, &opts(3, 1e-3), None).unwrap();
            m.net.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn best_checkpoint_not_worse_than_init() {
        let (x, y) = toy_set(40, 3);
        let labels: Vec<LabelVector> = y.iter().map(|&c| LabelVector::onehot(c, 2)).collect();
        let mut m = RoleNet { net: Network::init(&toy_spec(), 4).unwrap(), role: Role::Prd, eps: 1e-7 };
        let r = fit(&mut m, &x, &labels, &opts(5, 1e-2), None).unwrap();
        assert!(r.best_val.total <= r.epochs[0].val.total);
        let (_, val) = split_train_val(40, 0.1, 5).unwrap();
        let again = mean_loss(&m, &x, &labels, &val).unwrap();
        assert!((again.total - r.best_val.total).abs() < 1e-12);
    }

    #[test]
    fn cf_learns_separable_candidates() {
        let (x, y) = toy_set(64, 4);
        // candidate set = the true class; the cf head must push the other class up
        let labels: Vec<LabelVector> = y.iter().map(|&c| LabelVector::candidate(&[c as u8], 2)).collect();
        let mut m = RoleNet { net: Network::init(&toy_spec(), 5).unwrap(), role: Role::Cf, eps: 1e-7 };
        let o = FitOptions { augment: false, patience: 50, ..opts(50, 1e-2) };
        let r = fit(&mut m, &x, &labels, &o, None).unwrap();
        assert!(r.best_val.cf < 0.05, "best val cf loss {}", r.best_val.cf);
    }

    #[test]
    fn degenerate_dar_matches_prd_only() {
        let (x, y) = toy_set(40, 6);
        let labels: Vec<LabelVector> = y.iter().map(|&c| LabelVector::onehot(c, 2)).collect();
        let spec = toy_spec();
        let prd = Network::init(&spec, 7).unwrap();
        let o = opts(3, 1e-3);
        let mut plain = RoleNet { net: prd.clone(), role: Role::Prd, eps: 1e-7 };
        let rp = fit(&mut plain, &x, &labels, &o, None).unwrap();
        let dar = DarModel::new(prd, Network::init(&spec, 8).unwrap(), Network::init(&spec, 9).unwrap(), spec.m + 1).unwrap();
        let mut d = DarTrainer { model: dar, loss: LossConfig { mu: 0.0, delta: 0.0, ..LossConfig::default() }, freeze_siblings: false };
        let rd = fit(&mut d, &x, &labels, &o, None).unwrap();
        let trace = |r: &FitReport| r.steps.iter().map(|s| s.loss.prd.to_bits()).collect::<Vec<_>>();
        assert_eq!(trace(&rp), trace(&rd));
        assert_eq!(plain.net.params, d.model.prd.params);
    }

    #[test]
    fn frozen_siblings_unchanged() {
        let (x, y) = toy_set(40, 7);
        let labels: Vec<LabelVector> = y.iter().map(|&c| LabelVector::onehot(c, 2)).collect();
        let spec = toy_spec();
        let n = |s| Network::init(&spec, s).unwrap();
        let dar = DarModel::new(n(1), n(2), n(3), 1).unwrap();
        let mut d = DarTrainer { model: dar.clone(), loss: LossConfig::default(), freeze_siblings: true };
        fit(&mut d, &x, &labels, &opts(2, 1e-2), None).unwrap();
        assert_eq!(d.model.cf, dar.cf);
        assert_eq!(d.model.lr, dar.lr);
        assert_ne!(d.model.prd, dar.prd);
    }

    #[test]
    fn joint_mv_gradients_match_finite_differences() {
        let spec = BackboneSpec { m: 2, channels: vec![3, 4], strides: vec![2, 1], input_size: 8, q: 3 };
        let n = |s| Network::init(&spec, s).unwrap();
        let mv = MvModel::new(
            [ViewNet::Dar(DarModel::new(n(1), n(2), n(3), 2).unwrap()), ViewNet::Plain(n(4)), ViewNet::Plain(n(5))],
            Fusion::averaging(3),
        )
        .unwrap();
        let mut t = JointMvTrainer { mv, eps: 1e-7 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut patch = || Patch { size: 8, data: (0..64).map(|_| rng.gen_range(0.0..1.0)).collect() };
        let x = PatchTriplet { axial: patch(), sagittal: patch(), coronal: patch() };
        let y = LabelVector::onehot(2, 3);
        let mut grads = t.zero_grads();
        t.accumulate(&x, &y, &mut grads).unwrap();
        let h = 2e-3f32;
        let n_tensors = grads.len();
        for ti in (0..n_tensors).step_by(3) {
            let len = grads[ti].len();
            for i in (0..len).step_by(4) {
                let orig = t.params()[ti][i];
                t.params_mut()[ti][i] = orig + h;
                let up = t.eval_loss(&x, &y).unwrap().total;
                t.params_mut()[ti][i] = orig - h;
                let down = t.eval_loss(&x, &y).unwrap().total;
                t.params_mut()[ti][i] = orig;
                let fd = (up - down) / (2.0 * h as f64);
                let an = grads[ti][i] as f64;
                assert!((fd - an).abs() <= 3e-2 * an.abs().max(fd.abs()).max(0.02), "tensor {ti} idx {i}: {fd} vs {an}");
            }
        }
    }
}
