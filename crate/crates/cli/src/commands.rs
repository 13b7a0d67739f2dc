use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dar_core::checkpoint::{load_checkpoint, load_dar, load_mv, load_network, save_checkpoint, Checkpoint};
use dar_core::dar::{Role, ViewNet};
use dar_core::data_model::write_manifest;
use dar_core::pipeline::{
    aggregate_compare, aggregate_curve, aggregate_cv, backbone_for, compare_seed, evaluate_mv, finetune_dar, load_examples,
    plan_crossval, pretrain, robustness_seed, run_fold, split_examples, sweep_seed, train_fusion, Example, MetricSummary,
    StageLog, COMPARE_MODELS,
};
use dar_core::prep::prepare_triplet;
use dar_core::report::{fmt_f64, write_curve_csv, write_json, write_metrics, write_metrics_csv, write_step_log, write_sweep_csv};
use dar_core::synth::{gen_dataset, load_ground_truth};
use dar_core::viz::{dump_feature_maps, plot_lines};
use dar_core::{load_manifest, partition_dataset, read_volume, write_volume, AnnotationRecord, DarError, Result, View};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub run_dir: PathBuf,
    pub jobs: usize,
    pub plot: bool,
}

impl Ctx {
    fn par<T: Send, R: Send>(&self, items: Vec<T>, f: impl Fn(T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build()
            .map_err(|e| DarError::Config(format!("thread pool: {e}")))?;
        pool.install(|| items.into_par_iter().map(f).collect())
    }

    fn out(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }
}

fn need<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| DarError::Config(format!("`{what}` must be set for this command")))
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn records(cfg: &ExperimentConfig) -> Result<(Vec<AnnotationRecord>, PathBuf)> {
    let path = need(&cfg.manifest, "manifest")?;
    Ok((load_manifest(path, cfg.q)?, manifest_dir(path)))
}

/// Training examples; the ground-truth sidecar is not read.
fn train_examples(cfg: &ExperimentConfig) -> Result<Vec<Example>> {
    let (recs, base) = records(cfg)?;
    load_examples(&recs, &base, &cfg.prep, None)
}

/// The test manifest when set, else the training manifest scored against
/// its sidecar (or its CR labels).
fn test_examples(cfg: &ExperimentConfig) -> Result<Vec<Example>> {
    let (path, truth) = match &cfg.test_manifest {
        Some(p) => (p.as_path(), cfg.test_ground_truth.as_deref()),
        None => (need(&cfg.manifest, "manifest or test_manifest")?, cfg.ground_truth.as_deref()),
    };
    let truth = truth.map(load_ground_truth).transpose()?;
    load_examples(&load_manifest(path, cfg.q)?, &manifest_dir(path), &cfg.prep, truth.as_ref())
}

fn views(cfg: &ExperimentConfig) -> Result<Vec<View>> {
    match &cfg.stage.view {
        None => Ok(View::ALL.to_vec()),
        Some(v) => View::parse(v).map(|v| vec![v]).ok_or_else(|| DarError::Config(format!("unknown view `{v}`"))),
    }
}

fn roles(cfg: &ExperimentConfig) -> Result<Vec<Role>> {
    match &cfg.stage.role {
        None => Ok(Role::ALL.to_vec()),
        Some(r) => Role::parse(r).map(|r| vec![r]).ok_or_else(|| DarError::Config(format!("unknown role `{r}`"))),
    }
}

fn input_size(cfg: &ExperimentConfig) -> usize {
    cfg.prep.patch_size
}

fn maybe_plot(ctx: &Ctx, name: &str, series: &[Vec<(f64, f64)>]) -> Result<Option<PathBuf>> {
    if !ctx.plot {
        return Ok(None);
    }
    let path = ctx.out(name);
    plot_lines(series, &path, 480, 320)?;
    Ok(Some(path))
}

pub fn synth(ctx: &Ctx) -> Result<Value> {
    let s = &ctx.cfg.synth;
    let paths = gen_dataset(&s.spec, &s.annotators, &ctx.out("data"))?;
    let summary = partition_dataset(&load_manifest(&paths.manifest, s.spec.q)?, s.spec.q)?.summary();
    write_json(&ctx.out("summary.json"), &summary)?;
    Ok(json!({ "paths": paths, "summary": summary }))
}

pub fn partition(ctx: &Ctx) -> Result<Value> {
    let (recs, _) = records(&ctx.cfg)?;
    let parts = partition_dataset(&recs, ctx.cfg.q)?;
    let summary = parts.summary();
    // Subset manifests keep volume paths valid relative to the original manifest.
    let base = manifest_dir(need(&ctx.cfg.manifest, "manifest")?);
    for (name, subset) in [("cr", &parts.cr), ("ic", &parts.ic), ("lr", &parts.lr)] {
        let rs: Vec<AnnotationRecord> = subset
            .iter()
            .map(|(r, _)| AnnotationRecord { volume_ref: std::path::absolute(base.join(&r.volume_ref)).unwrap_or_else(|_| base.join(&r.volume_ref)), ..r.clone() })
            .collect();
        write_manifest(&ctx.out(&format!("{name}.jsonl")), &rs)?;
    }
    write_json(&ctx.out("summary.json"), &summary)?;
    Ok(json!({ "summary": summary }))
}

/// Writes each prepared triplet as a three-slice volume.
pub fn preprocess(ctx: &Ctx) -> Result<Value> {
    let (recs, base) = records(&ctx.cfg)?;
    let written = ctx.par(recs, |r| {
        let vol = read_volume(&base.join(&r.volume_ref))?;
        let t = prepare_triplet(&vol, r.center, &ctx.cfg.prep)?;
        let rel = PathBuf::from("patches").join(format!("{}.nvol", r.id));
        write_volume(&t.to_volume(), &ctx.out(&rel.to_string_lossy()))?;
        Ok((r.id, rel))
    })?;
    let index: BTreeMap<String, PathBuf> = written.into_iter().collect();
    write_json(&ctx.out("patches.json"), &index)?;
    Ok(json!({ "patches": index.len() }))
}

pub fn pretrain_cmd(ctx: &Ctx) -> Result<Value> {
    let cfg = &ctx.cfg;
    let examples = train_examples(cfg)?;
    let split = split_examples(&examples, cfg.q)?;
    let spec = backbone_for(&cfg.train, input_size(cfg), cfg.q);
    let jobs: Vec<(Role, View)> = roles(cfg)?.into_iter().flat_map(|r| views(cfg).unwrap_or_default().into_iter().map(move |v| (r, v))).collect();
    let results = ctx.par(jobs, |(role, view)| {
        let subset = match role {
            Role::Prd => &split.cr,
            Role::Cf => &split.ic,
            Role::Lr => &split.lr,
        };
        let (net, report) = pretrain(role, view, subset, &spec, &cfg.train)?;
        let path = ctx.out(&format!("{}_{}.ckpt", role.name(), view.name()));
        save_checkpoint(&Checkpoint::from_network(&net, Some(role), Some(view)), &path)?;
        Ok(StageLog { stage: format!("pretrain-{}", role.name()), view: Some(view), report })
    })?;
    write_step_log(&ctx.out("train_log.jsonl"), &results)?;
    Ok(json!({ "checkpoints": results.len() }))
}

pub fn finetune(ctx: &Ctx) -> Result<Value> {
    let cfg = &ctx.cfg;
    let dir = need(&cfg.stage.checkpoints, "stage.checkpoints")?;
    let examples = train_examples(cfg)?;
    let split = split_examples(&examples, cfg.q)?;
    let logs = ctx.par(views(cfg)?, |view| {
        let load = |r: Role| load_network(&dir.join(format!("{}_{}.ckpt", r.name(), view.name())));
        let (dar, report) = finetune_dar(view, load(Role::Prd)?, load(Role::Cf)?, load(Role::Lr)?, &split.cr, &cfg.train)?;
        save_checkpoint(&Checkpoint::from_dar(&dar, Some(view)), &ctx.out(&format!("dar_{}.ckpt", view.name())))?;
        Ok(StageLog { stage: "finetune".into(), view: Some(view), report })
    })?;
    write_step_log(&ctx.out("train_log.jsonl"), &logs)?;
    Ok(json!({ "checkpoints": logs.len() }))
}

/// Fusion over `dar_<view>.ckpt`, falling back to `prd_<view>.ckpt`.
pub fn fuse_train(ctx: &Ctx) -> Result<Value> {
    let cfg = &ctx.cfg;
    let dir = need(&cfg.stage.checkpoints, "stage.checkpoints")?;
    let mut nets = Vec::with_capacity(3);
    for view in View::ALL {
        let dar = dir.join(format!("dar_{}.ckpt", view.name()));
        nets.push(if dar.exists() {
            ViewNet::Dar(load_dar(&dar)?)
        } else {
            ViewNet::Plain(load_network(&dir.join(format!("prd_{}.ckpt", view.name())))?)
        });
    }
    let examples = train_examples(cfg)?;
    let split = split_examples(&examples, cfg.q)?;
    let (mv, report) = train_fusion(nets.try_into().expect("three views"), &split.cr, &cfg.train)?;
    save_checkpoint(&Checkpoint::from_mv(&mv), &ctx.out("mv.ckpt"))?;
    write_step_log(&ctx.out("train_log.jsonl"), &[StageLog { stage: "fusion".into(), view: None, report }])?;
    Ok(json!({ "checkpoint": ctx.out("mv.ckpt") }))
}

pub fn eval(ctx: &Ctx) -> Result<Value> {
    let model = load_mv(need(&ctx.cfg.stage.model, "stage.model")?)?;
    let report = evaluate_mv(&model, &test_examples(&ctx.cfg)?)?;
    write_metrics(&ctx.run_dir, &report)?;
    write_metrics_csv(&ctx.out("metrics.csv"), &["seed"], &[(vec![ctx.cfg.train.seed.to_string()], (&report).into())])?;
    Ok(json!({ "accuracy": report.accuracy, "macro_f1": report.macro_f1, "macro_auc": report.macro_auc }))
}

pub fn crossval(ctx: &Ctx) -> Result<Value> {
    let cfg = &ctx.cfg;
    let cv = &cfg.crossval;
    let (recs, base) = records(cfg)?;
    let plans = plan_crossval(&recs, cv.folds, cv.repeats, cfg.train.seed, cv.seed_stride)?;
    write_json(&ctx.out("folds.json"), &plans)?;
    let examples = load_examples(&recs, &base, &cfg.prep, None)?;
    let runs = ctx.par(plans, |p| run_fold(&examples, &p, cfg.q, &cfg.train))?;
    let rows: Vec<(Vec<String>, MetricSummary)> = runs
        .iter()
        .map(|r| (vec![r.repeat.to_string(), r.fold.to_string(), r.seed.to_string(), r.n_test.to_string()], r.metrics))
        .collect();
    write_metrics_csv(&ctx.out("metrics.csv"), &["repeat", "fold", "seed", "n_test"], &rows)?;
    let report = aggregate_cv(cv.folds, cv.repeats, cv.seed_stride, runs);
    write_json(&ctx.out("crossval.json"), &report)?;
    Ok(json!({ "mean": report.mean, "std": report.std }))
}

pub fn sweep(ctx: &Ctx) -> Result<Value> {
    let cfg = &ctx.cfg;
    let train = train_examples(cfg)?;
    let test = test_examples(cfg)?;
    let ks = if cfg.grid.k.is_empty() { vec![cfg.train.k()] } else { cfg.grid.k.clone() };
    let per_seed = ctx.par(cfg.seeds(), |seed| {
        let t = dar_core::train::TrainConfig { seed, ..cfg.train.clone() };
        sweep_seed(&train, &test, cfg.q, &t, &ks, &cfg.grid.mu, &cfg.grid.delta)
    })?;
    let rows: Vec<_> = per_seed.into_iter().flatten().collect();
    write_sweep_csv(&ctx.out("curve.csv"), &rows)?;
    write_json(&ctx.out("sweep.json"), &rows)?;
    // accuracy against mu, one line per (k, delta)
    let mut series: BTreeMap<(usize, String), Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rows {
        series.entry((r.k, fmt_f64(r.delta))).or_default().push((r.mu, r.metrics.accuracy));
    }
    maybe_plot(ctx, "curve.png", &series.into_values().collect::<Vec<_>>())?;
    Ok(json!({ "rows": rows.len() }))
}

pub fn robustness(ctx: &Ctx) -> Result<Value> {
    let cfg = &ctx.cfg;
    let train = train_examples(cfg)?;
    let test = test_examples(cfg)?;
    let per_seed = ctx.par(cfg.seeds(), |seed| {
        let t = dar_core::train::TrainConfig { seed, ..cfg.train.clone() };
        Ok((seed, robustness_seed(&train, &test, cfg.q, &t, &cfg.fractions)?))
    })?;
    let curve = aggregate_curve(&per_seed);
    write_curve_csv(&ctx.out("curve.csv"), &curve)?;
    write_json(&ctx.out("robustness.json"), &json!({ "curve": curve, "runs": per_seed }))?;
    maybe_plot(ctx, "curve.png", &[curve.iter().map(|p| (p.fraction, p.mean)).collect()])?;
    Ok(json!({ "curve": curve.iter().map(|p| json!({"fraction": p.fraction, "mean": p.mean, "std": p.std})).collect::<Vec<_>>() }))
}

pub fn compare(ctx: &Ctx) -> Result<Value> {
    let cfg = &ctx.cfg;
    let train = train_examples(cfg)?;
    let test = test_examples(cfg)?;
    let runs = ctx.par(cfg.seeds(), |seed| {
        let t = dar_core::train::TrainConfig { seed, ..cfg.train.clone() };
        compare_seed(&train, &test, cfg.q, &t)
    })?;
    for r in &runs {
        for (name, m) in COMPARE_MODELS.iter().zip([&r.mv_dar, &r.mv_prd, &r.ave]) {
            write_metrics(&ctx.out(&format!("seed{}/{name}", r.seed)), m)?;
        }
    }
    let report = aggregate_compare(&runs)?;
    let rows: Vec<(Vec<String>, MetricSummary)> =
        report.rows.iter().map(|r| (vec![r.seed.to_string(), r.model.clone()], r.metrics)).collect();
    write_metrics_csv(&ctx.out("metrics.csv"), &["seed", "model"], &rows)?;
    write_json(&ctx.out("compare.json"), &report)?;
    for (name, mean, std) in &report.summary {
        println!("{name:>8}  acc {:.4}±{:.4}  f1 {:.4}  auc {:.4}", mean.accuracy, std.accuracy, mean.macro_f1, mean.macro_auc);
    }
    for t in report.ttests.iter().filter(|t| t.metric == "accuracy") {
        println!("{} vs {}: p = {}", t.a, t.b, t.result.p_value);
    }
    Ok(json!({ "summary": report.summary }))
}

pub fn dump_features(ctx: &Ctx) -> Result<Value> {
    let cfg = &ctx.cfg;
    let model_path = need(&cfg.stage.model, "stage.model")?;
    let header_view = load_checkpoint(model_path)?.header.view;
    let dar = load_dar(model_path)?;
    let (recs, base) = records(cfg)?;
    let rec = match &cfg.stage.sample {
        Some(id) => recs.iter().find(|r| &r.id == id).ok_or_else(|| DarError::Config(format!("sample `{id}` not in manifest")))?,
        None => recs.first().ok_or_else(|| DarError::Config("manifest is empty".into()))?,
    };
    let view = match &cfg.stage.view {
        Some(v) => View::parse(v).ok_or_else(|| DarError::Config(format!("unknown view `{v}`")))?,
        None => header_view.unwrap_or(View::Axial),
    };
    let triplet = prepare_triplet(&read_volume(&base.join(&rec.volume_ref))?, rec.center, &cfg.prep)?;
    let block = cfg.stage.block.unwrap_or(dar.spec().m);
    let files = dump_feature_maps(&dar, triplet.view(view), block, &ctx.run_dir)?;
    Ok(json!({ "sample": rec.id, "view": view.name(), "block": block, "files": files }))
}
