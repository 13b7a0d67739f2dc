//! Experiment configuration: JSON file, `--set` overrides, run naming.

use std::path::{Path, PathBuf};

use dar_core::pipeline::{DEFAULT_FRACTIONS, DEFAULT_GRID};
use dar_core::prep::PrepConfig;
use dar_core::synth::{AnnotatorModel, SyntheticSpec};
use dar_core::train::TrainConfig;
use dar_core::DarError;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub spec: SyntheticSpec,
    pub annotators: AnnotatorModel,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let mut spec = SyntheticSpec::desk_default(2000, 0);
        spec.n_test = 1000;
        Self { annotators: AnnotatorModel::tridiagonal(spec.q), spec }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Empty means the configured k only.
    pub k: Vec<usize>,
    pub mu: Vec<f64>,
    pub delta: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { k: Vec::new(), mu: DEFAULT_GRID.to_vec(), delta: DEFAULT_GRID.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossvalConfig {
    pub folds: usize,
    pub repeats: usize,
    /// Seed offset between repeats; 0 repeats the same seed.
    pub seed_stride: u64,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        Self { folds: 5, repeats: 5, seed_stride: 1 }
    }
}

/// Inputs of the single-stage commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    /// `prd`, `cf` or `lr`; all three when unset.
    pub role: Option<String>,
    /// `axial`, `sagittal` or `coronal`; all three when unset.
    pub view: Option<String>,
    /// Directory holding `<role>_<view>.ckpt` or `dar_<view>.ckpt` files.
    pub checkpoints: Option<PathBuf>,
    /// A single checkpoint file (eval, dump-features).
    pub model: Option<PathBuf>,
    /// Record id for dump-features; the first record when unset.
    pub sample: Option<String>,
    /// 1-based block for dump-features; m when unset.
    pub block: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: Option<PathBuf>,
    /// Id-to-class sidecar for `manifest`; never read by training.
    pub ground_truth: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub test_ground_truth: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub q: usize,
    /// Seeds of multi-seed commands (compare, robustness, sweep); empty
    /// means `train.seed` alone.
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub prep: PrepConfig,
    pub grid: GridConfig,
    pub crossval: CrossvalConfig,
    pub fractions: Vec<f64>,
    pub synth: SynthConfig,
    pub stage: StageConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            ground_truth: None,
            test_manifest: None,
            test_ground_truth: None,
            output_dir: PathBuf::from("runs"),
            q: 5,
            seeds: Vec::new(),
            train: TrainConfig::desk(),
            prep: PrepConfig { crop_side: 32, patch_size: 32, ..PrepConfig::default() },
            grid: GridConfig::default(),
            crossval: CrossvalConfig::default(),
            fractions: DEFAULT_FRACTIONS.to_vec(),
            synth: SynthConfig::default(),
            stage: StageConfig::default(),
        }
    }
}

/// Objects merge key by key; anything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is parsed as JSON and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), DarError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| DarError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| DarError::Config(format!("override `{key}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    Err(DarError::Config("empty override key".into()))
}

impl ExperimentConfig {
    /// Reads `path` (or the defaults), applies overrides and the seed, and
    /// makes relative paths relative to the config file's directory.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, DarError> {
        let (file, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| DarError::io(p, e))?;
                let v: Value = serde_json::from_str(&text).map_err(|e| DarError::Config(format!("{}: {e}", p.display())))?;
                (v, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (Value::Object(Default::default()), PathBuf::new()),
        };
        let mut value = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
        merge(&mut value, file);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| DarError::Config(format!("invalid config: {e}")))?;
        if let Some(s) = seed {
            cfg.train.seed = s;
            cfg.synth.spec.seed = s;
        }
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut() {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        rebase(&mut cfg.manifest);
        rebase(&mut cfg.ground_truth);
        rebase(&mut cfg.test_manifest);
        rebase(&mut cfg.test_ground_truth);
        rebase(&mut cfg.stage.checkpoints);
        rebase(&mut cfg.stage.model);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DarError> {
        self.train.validate()?;
        self.synth.spec.validate()?;
        self.synth.annotators.validate()?;
        if self.q < 2 {
            return Err(DarError::Config(format!("q must be at least 2, got {}", self.q)));
        }
        for (name, grid) in [("mu", &self.grid.mu), ("delta", &self.grid.delta)] {
            if grid.is_empty() || grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(DarError::Config(format!("grid.{name} must be non-empty with values in [0, 1]")));
            }
        }
        if let Some(&k) = self.grid.k.iter().find(|&&k| k == 0 || k > self.train.m + 1) {
            return Err(DarError::Config(format!("grid.k value {k} outside 1..={}", self.train.m + 1)));
        }
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(DarError::Config("fractions must lie in [0, 1]".into()));
        }
        if self.crossval.folds < 2 || self.crossval.repeats == 0 {
            return Err(DarError::Config("crossval needs folds >= 2 and repeats >= 1".into()));
        }
        for p in [&self.manifest, &self.ground_truth, &self.test_manifest, &self.test_ground_truth, &self.stage.checkpoints, &self.stage.model]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(DarError::Config(format!("path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// First 12 hex digits of the SHA-256 of the resolved config JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..12].to_string()
    }

    /// `<root>/<command>-<hash>-s<seed>`; `DAR_OUT` replaces the root.
    pub fn run_dir(&self, command: &str) -> PathBuf {
        let root = std::env::var_os("DAR_OUT").map(PathBuf::from).unwrap_or_else(|| self.output_dir.clone());
        root.join(format!("{command}-{}-s{}", self.hash(), self.train.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_then_string() {
        let mut v = serde_json::json!({});
        apply_override(&mut v, "train.epochs=3").unwrap();
        apply_override(&mut v, "stage.role=cf").unwrap();
        apply_override(&mut v, "grid.mu=[0.5]").unwrap();
        assert_eq!(v, serde_json::json!({"train": {"epochs": 3}, "stage": {"role": "cf"}, "grid": {"mu": [0.5]}}));
        assert!(apply_override(&mut v, "novalue").is_err());
    }

    #[test]
    fn defaults_resolve_and_hash_is_stable() {
        let a = ExperimentConfig::resolve(None, &[], Some(4)).unwrap();
        let b = ExperimentConfig::resolve(None, &[], Some(4)).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.train.seed, 4);
        let c = ExperimentConfig::resolve(None, &["train.epochs=2".into()], Some(4)).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_and_bad_grids_rejected() {
        assert!(ExperimentConfig::resolve(None, &["bogus=1".into()], None).is_err());
        assert!(ExperimentConfig::resolve(None, &["grid.mu=[1.5]".into()], None).is_err());
        assert!(ExperimentConfig::resolve(None, &["manifest=/no/such/file".into()], None).is_err());
    }
}
