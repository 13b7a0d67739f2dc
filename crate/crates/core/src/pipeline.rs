//! Training stages and the experiments built from them.
//!
//! Stage order for the full model: pretrain prd on CR, cf on IC and lr on LR
//! for each view, fine-tune one DAR per view on CR, then train the fusion
//! layer on CR with the views frozen. Seed streams are tagged per stage and
//! role but not per view, so every view sees the same shuffles and
//! augmentation draws.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dar::{DarModel, Fusion, MvModel, Role, ViewNet};
use crate::data_model::{classify_scores, mean_proxy_label, AnnotationRecord, LabelKind, LabelVector, Subset};
use crate::error::{DarError, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::{BackboneSpec, Network};
use crate::objectives::softmax;
use crate::prep::{prepare_triplet, PrepConfig};
use crate::seed::{derive_seed, rng_for};
use crate::stats::{paired_ttest, TTestResult};
use crate::synth::PreparedSample;
use crate::train::{fit, DarTrainer, FitReport, FusionTrainer, JointMvTrainer, RoleNet, TrainConfig};
use crate::volume::{read_volume, Patch, PatchTriplet, View};

/// A record with prepared patches and, when known, its true class.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub scores: Vec<u8>,
    pub triplet: PatchTriplet,
    pub truth: Option<usize>,
}

impl From<PreparedSample> for Example {
    fn from(s: PreparedSample) -> Self {
        Self { id: s.record.id, scores: s.record.scores, triplet: s.triplet, truth: Some(s.true_class) }
    }
}

impl Example {
    /// Class used for scoring: the true class, else a consistent label.
    pub fn eval_class(&self) -> Result<usize> {
        if let Some(t) = self.truth {
            return Ok(t);
        }
        match classify_scores(&self.scores) {
            Some(Subset::Cr) => Ok(self.scores[0] as usize),
            _ => Err(DarError::Config(format!("{} has no ground truth and no consistent label", self.id))),
        }
    }
}

/// Reads each record's volume relative to `base` and prepares its patches.
pub fn load_examples(
    records: &[AnnotationRecord],
    base: &Path,
    prep: &PrepConfig,
    truth: Option<&BTreeMap<String, usize>>,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let vol = read_volume(&base.join(&r.volume_ref))?;
            Ok(Example {
                id: r.id.clone(),
                scores: r.scores.clone(),
                triplet: prepare_triplet(&vol, r.center, prep)?,
                truth: truth.and_then(|t| t.get(&r.id).copied()),
            })
        })
        .collect()
}

pub type Labeled<'a> = (&'a Example, LabelVector);

/// Examples routed by the divide rule with their subset labels.
#[derive(Debug, Clone, Default)]
pub struct Split<'a> {
    pub cr: Vec<Labeled<'a>>,
    pub ic: Vec<Labeled<'a>>,
    pub lr: Vec<Labeled<'a>>,
}

pub fn split_examples(examples: &[Example], q: usize) -> Result<Split<'_>> {
    let mut out = Split::default();
    for e in examples {
        if let Some(&s) = e.scores.iter().find(|&&s| s == 0 || s as usize > q) {
            return Err(DarError::ScoreOutOfRange { line: 0, score: s as i64, q });
        }
        match classify_scores(&e.scores) {
            None => return Err(DarError::EmptyScores { id: e.id.clone() }),
            Some(Subset::Cr) => out.cr.push((e, LabelVector::onehot(e.scores[0] as usize, q))),
            Some(Subset::Lr) => out.lr.push((e, LabelVector::onehot(e.scores[0] as usize, q))),
            Some(Subset::Ic) => out.ic.push((e, LabelVector::candidate(&e.scores, q))),
        }
    }
    Ok(out)
}

/// Every example labelled with its rounded mean score.
pub fn proxy_labeled(examples: &[Example], q: usize) -> Result<Vec<Labeled<'_>>> {
    examples.iter().map(|e| Ok((e, LabelVector::onehot(mean_proxy_label(&e.scores, q)?, q)))).collect()
}

/// Training log of one stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub view: Option<View>,
    pub report: FitReport,
}

fn view_inputs(items: &[Labeled<'_>], view: View) -> (Vec<Patch>, Vec<LabelVector>) {
    items.iter().map(|(e, l)| (e.triplet.view(view).clone(), l.clone())).unzip()
}

pub fn backbone_for(cfg: &TrainConfig, input_size: usize, q: usize) -> BackboneSpec {
    BackboneSpec::with_blocks(cfg.m, input_size, q)
}

fn seeded(cfg: &TrainConfig, lr0: f64, tag: &str) -> crate::train::FitOptions {
    crate::train::FitOptions { seed: derive_seed(cfg.seed, tag, 0), ..cfg.fit_options(lr0) }
}

/// Trains one network with its role loss on its subset.
pub fn pretrain(
    role: Role,
    view: View,
    items: &[Labeled<'_>],
    spec: &BackboneSpec,
    cfg: &TrainConfig,
) -> Result<(Network, FitReport)> {
    if items.is_empty() {
        return Err(DarError::EmptySubset(format!("{} pretraining", role.name())));
    }
    let expected = if role == Role::Cf { LabelKind::Candidate } else { LabelKind::OneHot };
    if let Some((_, l)) = items.iter().find(|(_, l)| l.kind != expected) {
        return Err(DarError::WrongKind { expected: expected.name(), found: l.kind.name() });
    }
    let init_seed = derive_seed(cfg.seed, &format!("init-{}-{}", role.name(), view.name()), 0);
    let mut model = RoleNet { net: Network::init(spec, init_seed)?, role, eps: cfg.loss.eps };
    let (x, y) = view_inputs(items, view);
    let report = fit(&mut model, &x, &y, &seeded(cfg, cfg.lr_pretrain, &format!("pretrain-{}", role.name())), None)?;
    Ok((model.net, report))
}

/// Prd-only training continued at the fine-tuning rate, on the fine-tuning
/// seed stream.
pub fn continue_prd(prd: Network, view: View, cr: &[Labeled<'_>], cfg: &TrainConfig) -> Result<(Network, FitReport)> {
    let _ = view;
    let mut model = RoleNet { net: prd, role: Role::Prd, eps: cfg.loss.eps };
    let (x, y) = view_inputs(cr, view);
    let report = fit(&mut model, &x, &y, &seeded(cfg, cfg.lr_finetune, "finetune"), None)?;
    Ok((model.net, report))
}

pub fn finetune_dar(
    view: View,
    prd: Network,
    cf: Network,
    lr: Network,
    cr: &[Labeled<'_>],
    cfg: &TrainConfig,
) -> Result<(DarModel, FitReport)> {
    if cr.is_empty() {
        return Err(DarError::EmptySubset("DAR fine-tuning".into()));
    }
    let model = DarModel::new(prd, cf, lr, cfg.k())?;
    let mut t = DarTrainer { model, loss: cfg.loss, freeze_siblings: cfg.freeze_siblings };
    let (x, y) = view_inputs(cr, view);
    let report = fit(&mut t, &x, &y, &seeded(cfg, cfg.lr_finetune, "finetune"), None)?;
    Ok((t.model, report))
}

/// Trains the fusion layer on frozen per-view predictions.
pub fn train_fusion(views: [ViewNet; 3], items: &[Labeled<'_>], cfg: &TrainConfig) -> Result<(MvModel, FitReport)> {
    if items.is_empty() {
        return Err(DarError::EmptySubset("fusion training".into()));
    }
    let q = views[0].spec().q;
    let mv = MvModel::new(views, Fusion::averaging(q))?;
    let x: Vec<Vec<f64>> = items.iter().map(|(e, _)| mv.concat_probs(&e.triplet)).collect::<Result<_>>()?;
    let y: Vec<LabelVector> = items.iter().map(|(_, l)| l.clone()).collect();
    let mut t = FusionTrainer { fusion: mv.fusion.clone(), eps: cfg.loss.eps };
    let report = fit(&mut t, &x, &y, &seeded(cfg, cfg.lr_fusion, "fusion"), None)?;
    Ok((MvModel { fusion: t.fusion, ..mv }, report))
}

/// Optional end-to-end pass through views and fusion together.
pub fn train_joint(mv: MvModel, items: &[Labeled<'_>], cfg: &TrainConfig) -> Result<(MvModel, FitReport)> {
    let x: Vec<PatchTriplet> = items.iter().map(|(e, _)| e.triplet.clone()).collect();
    let y: Vec<LabelVector> = items.iter().map(|(_, l)| l.clone()).collect();
    let mut t = JointMvTrainer { mv, eps: cfg.loss.eps };
    let report = fit(&mut t, &x, &y, &seeded(cfg, cfg.lr_finetune, "joint"), None)?;
    Ok((t.mv, report))
}

#[derive(Debug, Clone)]
pub struct TrainedMv {
    pub model: MvModel,
    pub logs: Vec<StageLog>,
}

fn log(stage: &str, view: Option<View>, report: FitReport) -> StageLog {
    StageLog { stage: stage.into(), view, report }
}

fn finish_mv(views: [ViewNet; 3], fusion_items: &[Labeled<'_>], cfg: &TrainConfig, mut logs: Vec<StageLog>) -> Result<TrainedMv> {
    let (mut model, r) = train_fusion(views, fusion_items, cfg)?;
    logs.push(log("fusion", None, r));
    if cfg.joint_mv {
        let (m, r) = train_joint(model, fusion_items, cfg)?;
        model = m;
        logs.push(log("joint", None, r));
    }
    Ok(TrainedMv { model, logs })
}

/// Pretrained prediction networks for the three views.
pub fn pretrain_prd_views(items: &[Labeled<'_>], spec: &BackboneSpec, cfg: &TrainConfig) -> Result<([Network; 3], Vec<StageLog>)> {
    let mut nets = Vec::with_capacity(3);
    let mut logs = Vec::new();
    for view in View::ALL {
        let (n, r) = pretrain(Role::Prd, view, items, spec, cfg)?;
        nets.push(n);
        logs.push(log("pretrain-prd", Some(view), r));
    }
    Ok((nets.try_into().expect("three views"), logs))
}

/// Plain multi-view model from pretrained prediction networks.
pub fn mv_prd_from(prd: [Network; 3], items: &[Labeled<'_>], cfg: &TrainConfig, logs: Vec<StageLog>) -> Result<TrainedMv> {
    finish_mv(prd.map(ViewNet::Plain), items, cfg, logs)
}

/// Full divide-and-rule model from pretrained prediction networks.
pub fn mv_dar_from(
    prd: &[Network; 3],
    split: &Split<'_>,
    spec: &BackboneSpec,
    cfg: &TrainConfig,
    mut logs: Vec<StageLog>,
) -> Result<TrainedMv> {
    let mut views = Vec::with_capacity(3);
    for (v, view) in View::ALL.into_iter().enumerate() {
        let (cf, r) = pretrain(Role::Cf, view, &split.ic, spec, cfg)?;
        logs.push(log("pretrain-cf", Some(view), r));
        let (lr, r) = pretrain(Role::Lr, view, &split.lr, spec, cfg)?;
        logs.push(log("pretrain-lr", Some(view), r));
        let (dar, r) = finetune_dar(view, prd[v].clone(), cf, lr, &split.cr, cfg)?;
        logs.push(log("finetune", Some(view), r));
        views.push(ViewNet::Dar(dar));
    }
    finish_mv(views.try_into().expect("three views"), &split.cr, cfg, logs)
}

fn input_size(examples: &[Example]) -> Result<usize> {
    examples.first().map(|e| e.triplet.axial.size).ok_or_else(|| DarError::EmptySubset("training examples".into()))
}

pub fn train_mv_prd(examples: &[Example], q: usize, cfg: &TrainConfig) -> Result<TrainedMv> {
    let spec = backbone_for(cfg, input_size(examples)?, q);
    let split = split_examples(examples, q)?;
    let (prd, logs) = pretrain_prd_views(&split.cr, &spec, cfg)?;
    mv_prd_from(prd, &split.cr, cfg, logs)
}

pub fn train_mv_dar(examples: &[Example], q: usize, cfg: &TrainConfig) -> Result<TrainedMv> {
    let spec = backbone_for(cfg, input_size(examples)?, q);
    let split = split_examples(examples, q)?;
    let (prd, logs) = pretrain_prd_views(&split.cr, &spec, cfg)?;
    mv_dar_from(&prd, &split, &spec, cfg, logs)
}

/// Mean-score proxy baseline: plain multi-view model on every record.
pub fn baseline_ave(examples: &[Example], q: usize, cfg: &TrainConfig) -> Result<TrainedMv> {
    let spec = backbone_for(cfg, input_size(examples)?, q);
    let items = proxy_labeled(examples, q)?;
    let (prd, logs) = pretrain_prd_views(&items, &spec, cfg)?;
    mv_prd_from(prd, &items, cfg, logs)
}

/// Softmax of the fused logits for every example.
pub fn predict_mv(model: &MvModel, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    examples.iter().map(|e| Ok(softmax(&model.mv_forward(&e.triplet)?))).collect()
}

pub fn evaluate_mv(model: &MvModel, test: &[Example]) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(DarError::EmptyTestSet);
    }
    let truth: Vec<usize> = test.iter().map(Example::eval_class).collect::<Result<_>>()?;
    evaluate(&predict_mv(model, test)?, &truth, model.fusion.q)
}

/// Headline numbers of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
}

impl From<&MetricsReport> for MetricSummary {
    fn from(r: &MetricsReport) -> Self {
        Self { accuracy: r.accuracy, macro_recall: r.macro_recall, macro_f1: r.macro_f1, macro_auc: r.macro_auc }
    }
}

impl MetricSummary {
    pub const NAMES: [&'static str; 4] = ["accuracy", "macro_recall", "macro_f1", "macro_auc"];

    pub fn values(&self) -> [f64; 4] {
        [self.accuracy, self.macro_recall, self.macro_f1, self.macro_auc]
    }

    fn from_values(v: [f64; 4]) -> Self {
        Self { accuracy: v[0], macro_recall: v[1], macro_f1: v[2], macro_auc: v[3] }
    }

    /// Per-metric mean and sample standard deviation (0 for a single run).
    pub fn mean_std(runs: &[MetricSummary]) -> (MetricSummary, MetricSummary) {
        let n = runs.len() as f64;
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for i in 0..4 {
            mean[i] = runs.iter().map(|r| r.values()[i]).sum::<f64>() / n;
            if runs.len() > 1 {
                std[i] = (runs.iter().map(|r| (r.values()[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            }
        }
        (Self::from_values(mean), Self::from_values(std))
    }
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareSeed {
    pub seed: u64,
    pub mv_dar: MetricsReport,
    pub mv_prd: MetricsReport,
    pub ave: MetricsReport,
}

/// MV-DAR, MV-Prd and AVE trained on one seed; MV-DAR and MV-Prd share their
/// pretrained prediction networks.
pub fn compare_seed(train: &[Example], test: &[Example], q: usize, cfg: &TrainConfig) -> Result<CompareSeed> {
    let spec = backbone_for(cfg, input_size(train)?, q);
    let split = split_examples(train, q)?;
    let (prd, logs) = pretrain_prd_views(&split.cr, &spec, cfg)?;
    let mv_prd = mv_prd_from(prd.clone(), &split.cr, cfg, logs.clone())?;
    let mv_dar = mv_dar_from(&prd, &split, &spec, cfg, logs)?;
    let ave = baseline_ave(train, q, cfg)?;
    Ok(CompareSeed {
        seed: cfg.seed,
        mv_dar: evaluate_mv(&mv_dar.model, test)?,
        mv_prd: evaluate_mv(&mv_prd.model, test)?,
        ave: evaluate_mv(&ave.model, test)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRow {
    pub seed: u64,
    pub model: String,
    #[serde(flatten)]
    pub metrics: MetricSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedTest {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub result: TTestResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<ModelRow>,
    /// `(model, mean, std)`.
    pub summary: Vec<(String, MetricSummary, MetricSummary)>,
    /// Present when at least two seeds ran.
    pub ttests: Vec<PairedTest>,
}

pub const COMPARE_MODELS: [&str; 3] = ["mv_dar", "mv_prd", "ave"];

pub fn aggregate_compare(runs: &[CompareSeed]) -> Result<CompareReport> {
    let per_model = |name: &str| -> Vec<MetricSummary> {
        runs.iter()
            .map(|r| MetricSummary::from(match name {
                "mv_dar" => &r.mv_dar,
                "mv_prd" => &r.mv_prd,
                _ => &r.ave,
            }))
            .collect()
    };
    let mut rows = Vec::new();
    for r in runs {
        for (name, m) in [("mv_dar", &r.mv_dar), ("mv_prd", &r.mv_prd), ("ave", &r.ave)] {
            rows.push(ModelRow { seed: r.seed, model: name.into(), metrics: m.into() });
        }
    }
    let summary = COMPARE_MODELS
        .iter()
        .map(|name| {
            let (mean, std) = MetricSummary::mean_std(&per_model(name));
            (name.to_string(), mean, std)
        })
        .collect();
    let mut ttests = Vec::new();
    if runs.len() >= 2 {
        let dar = per_model("mv_dar");
        for other in ["mv_prd", "ave"] {
            let o = per_model(other);
            for (i, metric) in MetricSummary::NAMES.iter().enumerate() {
                let a: Vec<f64> = dar.iter().map(|m| m.values()[i]).collect();
                let b: Vec<f64> = o.iter().map(|m| m.values()[i]).collect();
                ttests.push(PairedTest {
                    a: "mv_dar".into(),
                    b: other.into(),
                    metric: metric.to_string(),
                    result: paired_ttest(&a, &b)?,
                });
            }
        }
    }
    Ok(CompareReport { rows, summary, ttests })
}

// ------------------------------------------------------------- robustness

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// Seeded subsample of `round(fraction * n)` items in their original order.
pub fn subsample<T: Clone>(items: &[T], fraction: f64, seed: u64, tag: &str) -> Vec<T> {
    if fraction >= 1.0 {
        return items.to_vec();
    }
    let keep = (fraction * items.len() as f64).round() as usize;
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut rng_for(seed, tag, (fraction * 1e6).round() as u64));
    let mut chosen = idx[..keep].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| items[i].clone()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FractionResult {
    pub fraction: f64,
    pub n_ic: usize,
    pub n_lr: usize,
    pub metrics: MetricsReport,
}

/// MV-DAR with IC and LR subsampled to each fraction; fraction 0 is the
/// plain MV-Prd model. Prd pretraining is shared across fractions.
pub fn robustness_seed(
    train: &[Example],
    test: &[Example],
    q: usize,
    cfg: &TrainConfig,
    fractions: &[f64],
) -> Result<Vec<FractionResult>> {
    let spec = backbone_for(cfg, input_size(train)?, q);
    let split = split_examples(train, q)?;
    let (prd, logs) = pretrain_prd_views(&split.cr, &spec, cfg)?;
    let mut out = Vec::with_capacity(fractions.len());
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(DarError::Config(format!("fraction {f} outside [0, 1]")));
        }
        let sub = Split {
            cr: split.cr.clone(),
            ic: subsample(&split.ic, f, cfg.seed, "subsample-ic"),
            lr: subsample(&split.lr, f, cfg.seed, "subsample-lr"),
        };
        let model = if f == 0.0 {
            mv_prd_from(prd.clone(), &split.cr, cfg, logs.clone())?
        } else {
            mv_dar_from(&prd, &sub, &spec, cfg, logs.clone())?
        };
        out.push(FractionResult { fraction: f, n_ic: sub.ic.len(), n_lr: sub.lr.len(), metrics: evaluate_mv(&model.model, test)? });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate_curve(per_seed: &[(u64, Vec<FractionResult>)]) -> Vec<CurvePoint> {
    let Some((_, first)) = per_seed.first() else { return Vec::new() };
    (0..first.len())
        .map(|i| {
            let accs: Vec<f64> = per_seed.iter().map(|(_, r)| r[i].metrics.accuracy).collect();
            let runs: Vec<MetricSummary> = accs.iter().map(|&a| MetricSummary { accuracy: a, ..Default::default() }).collect();
            let (mean, std) = MetricSummary::mean_std(&runs);
            CurvePoint {
                fraction: first[i].fraction,
                seeds: per_seed.iter().map(|(s, _)| *s).collect(),
                accuracies: accs,
                mean: mean.accuracy,
                std: std.accuracy,
            }
        })
        .collect()
}

// ------------------------------------------------------------------ sweep

pub const DEFAULT_GRID: [f64; 5] = [0.40, 0.45, 0.50, 0.55, 0.60];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub k: usize,
    pub mu: f64,
    pub delta: f64,
    #[serde(flatten)]
    pub metrics: MetricSummary,
}

/// Every `(k, mu, delta)` combination; pretraining does not depend on them
/// and is shared.
pub fn sweep_seed(
    train: &[Example],
    test: &[Example],
    q: usize,
    cfg: &TrainConfig,
    ks: &[usize],
    mus: &[f64],
    deltas: &[f64],
) -> Result<Vec<SweepRow>> {
    let spec = backbone_for(cfg, input_size(train)?, q);
    let split = split_examples(train, q)?;
    let (prd, mut logs) = pretrain_prd_views(&split.cr, &spec, cfg)?;
    let mut siblings = Vec::with_capacity(3);
    for view in View::ALL {
        let (cf, r) = pretrain(Role::Cf, view, &split.ic, &spec, cfg)?;
        logs.push(log("pretrain-cf", Some(view), r));
        let (lr, r) = pretrain(Role::Lr, view, &split.lr, &spec, cfg)?;
        logs.push(log("pretrain-lr", Some(view), r));
        siblings.push((cf, lr));
    }
    let mut rows = Vec::new();
    for &k in ks {
        for &mu in mus {
            for &delta in deltas {
                let c = TrainConfig { k: Some(k), loss: crate::objectives::LossConfig { mu, delta, ..cfg.loss }, ..cfg.clone() };
                c.validate()?;
                let mut views = Vec::with_capacity(3);
                for (v, view) in View::ALL.into_iter().enumerate() {
                    let (cf, lr) = siblings[v].clone();
                    views.push(ViewNet::Dar(finetune_dar(view, prd[v].clone(), cf, lr, &split.cr, &c)?.0));
                }
                let mv = finish_mv(views.try_into().expect("three views"), &split.cr, &c, Vec::new())?;
                let m = evaluate_mv(&mv.model, test)?;
                rows.push(SweepRow { seed: cfg.seed, k, mu, delta, metrics: (&m).into() });
            }
        }
    }
    Ok(rows)
}

// -------------------------------------------------------- cross-validation

/// Stratified folds over 1-based labels: each class is shuffled and dealt
/// round-robin, continuing the deal across classes.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || labels.len() < folds {
        return Err(DarError::FoldSize { samples: labels.len(), folds });
    }
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    let mut rng = rng_for(seed, "folds", folds as u64);
    let mut dealt = Vec::with_capacity(labels.len());
    for c in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        dealt.extend(members);
    }
    let mut out = vec![Vec::new(); folds];
    for (pos, i) in dealt.into_iter().enumerate() {
        out[pos % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Ids of one cross-validation run. IC and LR records are never tested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub repeat: usize,
    pub fold: usize,
    pub seed: u64,
    pub test_ids: Vec<String>,
    pub train_cr_ids: Vec<String>,
    pub external_ids: Vec<String>,
}

/// Repeat `r` uses seed `base_seed + r * seed_stride` for both the folds and
/// training.
pub fn plan_crossval(
    records: &[AnnotationRecord],
    folds: usize,
    repeats: usize,
    base_seed: u64,
    seed_stride: u64,
) -> Result<Vec<FoldPlan>> {
    let mut cr = Vec::new();
    let mut external = Vec::new();
    for r in records {
        match classify_scores(&r.scores) {
            Some(Subset::Cr) => cr.push(r),
            Some(_) => external.push(r.id.clone()),
            None => return Err(DarError::EmptyScores { id: r.id.clone() }),
        }
    }
    let labels: Vec<usize> = cr.iter().map(|r| r.scores[0] as usize).collect();
    let mut plans = Vec::with_capacity(folds * repeats);
    for rep in 0..repeats {
        let seed = base_seed.wrapping_add(rep as u64 * seed_stride);
        let parts = stratified_folds(&labels, folds, seed)?;
        for (f, test) in parts.iter().enumerate() {
            let in_test: BTreeSet<usize> = test.iter().copied().collect();
            plans.push(FoldPlan {
                repeat: rep,
                fold: f,
                seed,
                test_ids: test.iter().map(|&i| cr[i].id.clone()).collect(),
                train_cr_ids: (0..cr.len()).filter(|i| !in_test.contains(i)).map(|i| cr[i].id.clone()).collect(),
                external_ids: external.clone(),
            });
        }
    }
    Ok(plans)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub repeat: usize,
    pub fold: usize,
    pub seed: u64,
    pub n_test: usize,
    #[serde(flatten)]
    pub metrics: MetricSummary,
}

/// Trains MV-DAR on the fold's training ids and scores its test ids.
pub fn run_fold(examples: &[Example], plan: &FoldPlan, q: usize, cfg: &TrainConfig) -> Result<FoldResult> {
    let by_id: BTreeMap<&str, &Example> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let pick = |ids: &[String]| -> Result<Vec<Example>> {
        ids.iter()
            .map(|id| by_id.get(id.as_str()).map(|e| (*e).clone()).ok_or_else(|| DarError::Config(format!("unknown id {id}"))))
            .collect()
    };
    let mut train = pick(&plan.train_cr_ids)?;
    train.extend(pick(&plan.external_ids)?);
    let test = pick(&plan.test_ids)?;
    let c = TrainConfig { seed: plan.seed, ..cfg.clone() };
    let model = train_mv_dar(&train, q, &c)?;
    let m = evaluate_mv(&model.model, &test)?;
    Ok(FoldResult { repeat: plan.repeat, fold: plan.fold, seed: plan.seed, n_test: test.len(), metrics: (&m).into() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: usize,
    pub repeats: usize,
    pub seed_stride: u64,
    pub runs: Vec<FoldResult>,
    /// Mean over repeats of the per-repeat fold average.
    pub mean: MetricSummary,
    /// Standard deviation of the per-repeat fold averages.
    pub std: MetricSummary,
}

pub fn aggregate_cv(folds: usize, repeats: usize, seed_stride: u64, runs: Vec<FoldResult>) -> CvReport {
    let per_repeat: Vec<MetricSummary> = (0..repeats)
        .map(|r| {
            let rs: Vec<MetricSummary> = runs.iter().filter(|x| x.repeat == r).map(|x| x.metrics).collect();
            MetricSummary::mean_std(&rs).0
        })
        .collect();
    let (mean, std) = MetricSummary::mean_std(&per_repeat);
    CvReport { folds, repeats, seed_stride, runs, mean, std }
}
