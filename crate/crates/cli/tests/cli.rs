use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn dar(out_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dar")).args(args).env("DAR_OUT", out_root).output().expect("dar runs")
}

fn ok_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(stdout.lines().last().expect("json line")).expect("json output")
}

fn run_dir(v: &Value) -> PathBuf {
    PathBuf::from(v["run_dir"].as_str().unwrap())
}

/// Small synthetic set shared by the pipeline tests.
fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "train": { "epochs": 1, "batch_size": 8, "m": 2, "patience": 1 },
        "prep": { "crop_side": 16, "patch_size": 16 },
        "synth": { "spec": { "n_samples": 60, "n_test": 20 } }
    });
    let path = dir.join("tiny.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn synth(root: &Path, cfg: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let v = ok_json(&dar(root, &["synth", "--config", cfg.to_str().unwrap()]));
    let p = &v["paths"];
    let get = |k: &str| PathBuf::from(p[k].as_str().unwrap());
    (get("manifest"), get("test_manifest"), get("test_ground_truth"))
}

#[test]
fn partition_three_records() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.jsonl");
    fs::write(
        &manifest,
        concat!(
            "{\"id\":\"n01\",\"volume\":\"a.nvol\",\"annotations\":[3,3,3],\"center\":[1,2,3]}\n",
            "{\"id\":\"n02\",\"volume\":\"b.nvol\",\"annotations\":[2,3],\"center\":[1,2,3]}\n",
            "{\"id\":\"n03\",\"volume\":\"c.nvol\",\"annotations\":[4],\"center\":[1,2,3]}\n",
        ),
    )
    .unwrap();
    let set = format!("manifest={}", manifest.display());
    let v = ok_json(&dar(dir.path(), &["partition", "--set", &set]));
    assert_eq!(v["summary"], serde_json::json!({"cr": 1, "ic": 1, "lr": 1}));
    let rd = run_dir(&v);
    assert!(rd.join("config.json").exists());
    assert_eq!(fs::read_to_string(rd.join("ic.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn errors_are_json_with_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = dar(dir.path(), &["partition", "--set", "manifest=/definitely/missing.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\":\"x\",\"volume\":\"v\",\"annotations\":[6],\"center\":[0,0,0]}\n").unwrap();
    let o = dar(dir.path(), &["partition", "--set", &format!("manifest={}", bad.display())]);
    assert_eq!(o.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "data");
}

#[test]
fn staged_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config(root);
    let cfg_s = cfg.to_str().unwrap();
    let (manifest, test, truth) = synth(root, &cfg);
    let m = format!("manifest={}", manifest.display());
    let pre = run_dir(&ok_json(&dar(root, &["pretrain", "--config", cfg_s, "--set", &m])));
    assert!(pre.join("cf_sagittal.ckpt").exists());
    let log = fs::read_to_string(pre.join("train_log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "lr", "L_prd", "L_cf", "L_lr", "L_total"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }

    let ck = format!("stage.checkpoints={}", pre.display());
    let fine = run_dir(&ok_json(&dar(root, &["finetune", "--config", cfg_s, "--set", &m, "--set", &ck])));
    let ck = format!("stage.checkpoints={}", fine.display());
    let fused = run_dir(&ok_json(&dar(root, &["fuse-train", "--config", cfg_s, "--set", &m, "--set", &ck])));

    let eval_args = |out: &str| {
        vec![
            "eval".to_string(),
            "--config".into(),
            cfg_s.into(),
            "--set".into(),
            format!("stage.model={}", fused.join("mv.ckpt").display()),
            "--set".into(),
            format!("test_manifest={}", test.display()),
            "--set".into(),
            format!("test_ground_truth={}", truth.display()),
            "--set".into(),
            format!("output_dir={out}"),
        ]
    };
    let run_eval = |sub: &str| {
        let out = root.join(sub);
        let args = eval_args(out.to_str().unwrap());
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = Command::new(env!("CARGO_BIN_EXE_dar")).args(&args).env_remove("DAR_OUT").output().unwrap();
        fs::read(run_dir(&ok_json(&o)).join("metrics.json")).unwrap()
    };
    let a = run_eval("a");
    let b = run_eval("b");
    assert_eq!(a, b);
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["n"], 20);

    let dump = ok_json(&dar(
        root,
        &["dump-features", "--config", cfg_s, "--set", &m, "--set", &format!("stage.model={}", fine.join("dar_coronal.ckpt").display())],
    ));
    assert_eq!(dump["view"], "coronal");
    assert_eq!(dump["files"].as_array().unwrap().len(), 4);
    let bad_block =
        dar(root, &["dump-features", "--config", cfg_s, "--set", &m, "--set", &format!("stage.model={}", fine.join("dar_axial.ckpt").display()), "--set", "stage.block=9"]);
    assert_eq!(bad_block.status.code(), Some(2));
}

#[test]
fn sweep_emits_twenty_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config(root);
    let cfg_s = cfg.to_str().unwrap();
    let (manifest, test, truth) = synth(root, &cfg);
    let v = ok_json(&dar(
        root,
        &[
            "sweep",
            "--config",
            cfg_s,
            "--plot",
            "--set",
            &format!("manifest={}", manifest.display()),
            "--set",
            &format!("test_manifest={}", test.display()),
            "--set",
            &format!("test_ground_truth={}", truth.display()),
        ],
    ));
    let csv = fs::read_to_string(run_dir(&v).join("curve.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "seed,k,mu,delta,accuracy,macro_recall,macro_f1,macro_auc");
    assert_eq!(lines.count(), 25);
    assert!(run_dir(&v).join("curve.png").exists());
}
