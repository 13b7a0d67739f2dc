//! Report files: metrics.json, metrics.csv, roc_<class>.csv, curve.csv and
//! per-step JSON-lines training logs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{DarError, Result};
use crate::metrics::MetricsReport;
use crate::pipeline::{CurvePoint, MetricSummary, StageLog, SweepRow};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| DarError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| DarError::io(path, e))
}

/// Pretty JSON with a trailing newline. Field order follows the type, so the
/// bytes depend only on the value.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(r) = rows.iter().find(|r| r.len() != header.len()) {
        return Err(DarError::ShapeMismatch(format!("csv row of {} fields for {} columns", r.len(), header.len())));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| DarError::io(path, std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| DarError::io(path, std::io::Error::other(e.to_string())))?;
    write_text(path, &String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

pub const SUMMARY_COLUMNS: [&str; 4] = MetricSummary::NAMES;

fn summary_fields(m: &MetricSummary) -> Vec<String> {
    m.values().iter().map(|&v| fmt_f64(v)).collect()
}

/// metrics.json plus one roc_<class>.csv per class with a defined curve.
pub fn write_metrics(dir: &Path, report: &MetricsReport) -> Result<Vec<PathBuf>> {
    let mut written = vec![dir.join("metrics.json")];
    write_json(&written[0], report)?;
    for curve in &report.roc {
        let path = dir.join(format!("roc_{}.csv", curve.class));
        let rows: Vec<Vec<String>> = curve.points.iter().map(|&(f, t)| vec![fmt_f64(f), fmt_f64(t)]).collect();
        write_csv(&path, &["fpr", "tpr"], &rows)?;
        written.push(path);
    }
    Ok(written)
}

/// One row per run, labelled by free-form key columns.
pub fn write_metrics_csv(path: &Path, keys: &[&str], runs: &[(Vec<String>, MetricSummary)]) -> Result<()> {
    let header: Vec<&str> = keys.iter().copied().chain(SUMMARY_COLUMNS).collect();
    let rows: Vec<Vec<String>> = runs.iter().map(|(k, m)| k.iter().cloned().chain(summary_fields(m)).collect()).collect();
    write_csv(path, &header, &rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let runs: Vec<(Vec<String>, MetricSummary)> = rows
        .iter()
        .map(|r| (vec![r.seed.to_string(), r.k.to_string(), fmt_f64(r.mu), fmt_f64(r.delta)], r.metrics))
        .collect();
    write_metrics_csv(path, &["seed", "k", "mu", "delta"], &runs)
}

/// `fraction,mean,std,acc_seed<s>...`
pub fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let seeds: Vec<String> = points.first().map(|p| p.seeds.iter().map(|s| format!("acc_seed{s}")).collect()).unwrap_or_default();
    let header: Vec<&str> = ["fraction", "mean", "std"].into_iter().chain(seeds.iter().map(String::as_str)).collect();
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            [p.fraction, p.mean, p.std].iter().chain(&p.accuracies).map(|&v| fmt_f64(v)).collect()
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// One JSON object per optimizer step:
/// `{"stage", "view", "step", "lr", "L_prd", "L_cf", "L_lr", "L_total"}`.
pub fn write_step_log(path: &Path, logs: &[StageLog]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        stage: &'a str,
        view: Option<&'static str>,
        #[serde(flatten)]
        step: &'a crate::train::StepLog,
    }
    let mut s = String::new();
    for l in logs {
        for step in &l.report.steps {
            let line = Line { stage: &l.stage, view: l.view.map(|v| v.name()), step };
            writeln!(s, "{}", serde_json::to_string(&line)?).expect("string write");
        }
    }
    write_text(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate;

    #[test]
    fn metrics_files_and_roc_columns() {
        let dir = tempfile::tempdir().unwrap();
        let scores = vec![vec![0.9, 0.1], vec![0.3, 0.7], vec![0.6, 0.4]];
        let r = evaluate(&scores, &[1, 2, 2], 2).unwrap();
        let files = write_metrics(dir.path(), &r).unwrap();
        assert_eq!(files.len(), 3);
        let roc = fs::read_to_string(dir.path().join("roc_1.csv")).unwrap();
        assert!(roc.starts_with("fpr,tpr\n0,0\n"));
        let back: MetricsReport = serde_json::from_str(&fs::read_to_string(&files[0]).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_row_width_checked() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_csv(&dir.path().join("x.csv"), &["a", "b"], &[vec!["1".into()]]).is_err());
    }

    #[test]
    fn curve_columns_follow_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let p = CurvePoint { fraction: 0.2, seeds: vec![0, 1], accuracies: vec![0.5, 0.7], mean: 0.6, std: 0.1 };
        let path = dir.path().join("curve.csv");
        write_curve_csv(&path, &[p]).unwrap();
        assert_eq!(fs::read_to_string(path).unwrap(), "fraction,mean,std,acc_seed0,acc_seed1\n0.2,0.6,0.1,0.5,0.7\n");
    }
}
