//! Synthetic volumetric data with ordinal class geometry and simulated annotators.
//!
//! Each sample is a cube holding one blob whose radius, intensity and edge
//! irregularity grow with the class index. Annotator scores come from a
//! confusion matrix, so the mix of consistent, inconsistent and single-rater
//! records is controlled by the annotator model alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{write_manifest, AnnotationRecord};
use crate::error::{DarError, Result};
use crate::prep::{prepare_triplet, PrepConfig};
use crate::seed::rng_for;
use crate::volume::{write_volume, PatchTriplet, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGeometry {
    pub radius: (f64, f64),
    pub intensity: (f64, f64),
    /// Relative amplitude of radial edge modulation.
    pub roughness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub q: usize,
    pub n_samples: usize,
    /// Held-out samples written with their own manifest and ground truth.
    pub n_test: usize,
    pub cube_side: usize,
    pub spacing: [f32; 3],
    pub class_prior: Vec<f64>,
    pub geometry: Vec<ClassGeometry>,
    pub noise_amplitude: f64,
    /// Maximum offset of the blob centre from the cube centre, in voxels.
    pub center_jitter: i64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Five ordinal classes in a 32-voxel cube with overlapping neighbours.
    pub fn desk_default(n_samples: usize, seed: u64) -> Self {
        let q = 5;
        let geometry = (0..q)
            .map(|c| {
                let c = c as f64;
                let r0 = 2.5 + 1.4 * c;
                let i0 = 0.45 + 0.06 * c;
                ClassGeometry { radius: (r0, r0 + 2.4), intensity: (i0, i0 + 0.2), roughness: 0.05 + 0.06 * c }
            })
            .collect();
        Self {
            q,
            n_samples,
            n_test: 0,
            cube_side: 32,
            spacing: [1.0; 3],
            class_prior: vec![0.2, 0.25, 0.3, 0.15, 0.1],
            geometry,
            noise_amplitude: 0.05,
            center_jitter: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DarError::Config(m));
        if self.q == 0 || self.class_prior.len() != self.q || self.geometry.len() != self.q {
            return bad(format!("prior/geometry must have {} entries", self.q));
        }
        let total: f64 = self.class_prior.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.class_prior.iter().any(|&p| p < 0.0) {
            return bad(format!("class prior sums to {total}"));
        }
        for w in self.geometry.windows(2) {
            if !(w[0].radius.0 < w[1].radius.0 && w[0].radius.1 < w[1].radius.1) {
                return bad("radius ranges must increase with class".into());
            }
        }
        if self.geometry.iter().any(|g| g.radius.0 <= 0.0 || g.radius.1 < g.radius.0 || g.roughness < 0.0) {
            return bad("invalid radius range or roughness".into());
        }
        if self.cube_side < 4 || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad("cube side must be >= 4 and spacing positive".into());
        }
        Ok(())
    }

    /// Largest distance (in voxels) at which a blob of this class can be non-zero.
    pub fn max_extent(&self, class: usize) -> f64 {
        let g = &self.geometry[class - 1];
        g.radius.1 * (1.0 + g.roughness) + 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorModel {
    /// Row = true class, column = emitted score, both 0-based here.
    pub confusion: Vec<Vec<f64>>,
    /// Probability of 1, 2, 3, 4, ... annotators.
    pub annotator_count_dist: Vec<f64>,
}

impl AnnotatorModel {
    /// 0.7 on the true class, the rest split over ordinal neighbours.
    pub fn tridiagonal(q: usize) -> Self {
        let confusion = (0..q)
            .map(|t| {
                let mut row = vec![0.0; q];
                row[t] = 0.7;
                let neighbours: Vec<usize> =
                    [t.checked_sub(1), Some(t + 1).filter(|&n| n < q)].into_iter().flatten().collect();
                if neighbours.is_empty() {
                    row[t] = 1.0;
                }
                for &n in &neighbours {
                    row[n] = 0.3 / neighbours.len() as f64;
                }
                row
            })
            .collect();
        Self { confusion, annotator_count_dist: vec![0.30, 0.0, 0.05, 0.65] }
    }

    pub fn identity(q: usize, annotators: usize) -> Self {
        let confusion = (0..q).map(|t| (0..q).map(|s| if s == t { 1.0 } else { 0.0 }).collect()).collect();
        let mut dist = vec![0.0; annotators];
        dist[annotators - 1] = 1.0;
        Self { confusion, annotator_count_dist: dist }
    }

    pub fn q(&self) -> usize {
        self.confusion.len()
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.q();
        for (i, row) in self.confusion.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != q || row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(DarError::Config(format!("confusion row {} is not a distribution", i + 1)));
            }
        }
        let sum: f64 = self.annotator_count_dist.iter().sum();
        if self.annotator_count_dist.is_empty()
            || self.annotator_count_dist.iter().any(|&p| p < 0.0)
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(DarError::Config("annotator count distribution must sum to 1".into()));
        }
        Ok(())
    }

    /// Exact expected (CR, IC, LR) fractions under a class prior.
    pub fn expected_fractions(&self, prior: &[f64]) -> (f64, f64, f64) {
        let lr = self.annotator_count_dist[0];
        let mut cr = 0.0;
        for (t, &pt) in prior.iter().enumerate() {
            for (i, &pn) in self.annotator_count_dist.iter().enumerate().skip(1) {
                let n = i as i32 + 1;
                let agree: f64 = self.confusion[t].iter().map(|p| p.powi(n)).sum();
                cr += pt * pn * agree;
            }
        }
        (cr, 1.0 - lr - cr, lr)
    }
}

/// Draws the number of annotators, then that many i.i.d. scores from the
/// confusion row of `true_class` (1-based in, 1-based out).
pub fn simulate_annotators<R: Rng + ?Sized>(true_class: usize, model: &AnnotatorModel, rng: &mut R) -> Vec<u8> {
    let count = WeightedIndex::new(&model.annotator_count_dist).expect("valid count distribution");
    let row = WeightedIndex::new(&model.confusion[true_class - 1]).expect("valid confusion row");
    let n = count.sample(rng) + 1;
    (0..n).map(|_| (row.sample(rng) + 1) as u8).collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticVolume {
    pub volume: Volume,
    /// Blob centre in voxel coordinates.
    pub center: [i64; 3],
    pub radius: f64,
}

/// One blob over uniform background noise in `[-noise, noise]`.
pub fn gen_volume<R: Rng + ?Sized>(class: usize, spec: &SyntheticSpec, rng: &mut R) -> SyntheticVolume {
    let g = &spec.geometry[class - 1];
    let s = spec.cube_side;
    let u: f64 = rng.gen();
    let radius = g.radius.0 + u * (g.radius.1 - g.radius.0);
    let v: f64 = rng.gen();
    let intensity = g.intensity.0 + v * (g.intensity.1 - g.intensity.0);
    let jitter = spec.center_jitter;
    let center: [i64; 3] =
        std::array::from_fn(|_| (s / 2) as i64 + if jitter > 0 { rng.gen_range(-jitter..=jitter) } else { 0 });
    // three random directions and frequencies modulate the boundary
    let lobes: Vec<([f64; 3], f64, f64)> = (0..3)
        .map(|_| {
            let z: f64 = rng.gen_range(-1.0..1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            ([r * phi.cos(), r * phi.sin(), z], rng.gen_range(2.0..5.0), rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let noise = spec.noise_amplitude;
    let mut voxels = Vec::with_capacity(s * s * s);
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let d = [x as f64 - center[0] as f64, y as f64 - center[1] as f64, z as f64 - center[2] as f64];
                let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let mut value = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
                if dist < radius * (1.0 + g.roughness) + 0.5 {
                    let dir = if dist > 0.0 { d.map(|c| c / dist) } else { [0.0, 0.0, 1.0] };
                    let wobble: f64 = lobes
                        .iter()
                        .map(|(axis, freq, phase)| {
                            (freq * (axis[0] * dir[0] + axis[1] * dir[1] + axis[2] * dir[2]) + phase).sin()
                        })
                        .sum::<f64>()
                        / lobes.len() as f64;
                    let r_eff = radius * (1.0 + g.roughness * wobble);
                    let cover = (r_eff - dist + 0.5).clamp(0.0, 1.0);
                    value += intensity * cover;
                }
                voxels.push(value as f32);
            }
        }
    }
    SyntheticVolume { volume: Volume { dims: [s; 3], spacing: spec.spacing, voxels }, center, radius }
}

pub fn sample_class<R: Rng + ?Sized>(prior: &[f64], rng: &mut R) -> usize {
    WeightedIndex::new(prior).expect("valid prior").sample(rng) + 1
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub record: AnnotationRecord,
    pub true_class: usize,
    pub volume: SyntheticVolume,
}

fn gen_one(spec: &SyntheticSpec, model: &AnnotatorModel, tag: &str, prefix: &str, i: usize) -> SyntheticSample {
    let mut rng = rng_for(spec.seed, tag, i as u64);
    let true_class = sample_class(&spec.class_prior, &mut rng);
    let volume = gen_volume(true_class, spec, &mut rng);
    let scores = simulate_annotators(true_class, model, &mut rng);
    let id = format!("{prefix}{i:05}");
    let record = AnnotationRecord {
        volume_ref: PathBuf::from(format!("volumes/{id}.nvol")),
        id,
        scores,
        center: volume.center,
    };
    SyntheticSample { record, true_class, volume }
}

/// Training samples (`s00000`, ...) drawn from per-index seed streams.
pub fn generate_samples<'a>(
    spec: &'a SyntheticSpec,
    model: &AnnotatorModel,
) -> impl Iterator<Item = SyntheticSample> + 'a {
    let model = model.clone();
    (0..spec.n_samples).map(move |i| gen_one(spec, &model, "sample", "s", i))
}

/// Held-out samples (`t00000`, ...) from an independent stream.
pub fn generate_test_samples<'a>(
    spec: &'a SyntheticSpec,
    model: &AnnotatorModel,
) -> impl Iterator<Item = SyntheticSample> + 'a {
    let model = model.clone();
    (0..spec.n_test).map(move |i| gen_one(spec, &model, "test-sample", "t", i))
}

/// A record with its prepared patches and hidden true class, kept in memory.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub record: AnnotationRecord,
    pub true_class: usize,
    pub triplet: PatchTriplet,
}

pub fn prepare_samples(
    samples: impl Iterator<Item = SyntheticSample>,
    prep: &PrepConfig,
) -> Result<Vec<PreparedSample>> {
    samples
        .map(|s| {
            let triplet = prepare_triplet(&s.volume.volume, s.record.center, prep)?;
            Ok(PreparedSample { record: s.record, true_class: s.true_class, triplet })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedPaths {
    pub manifest: PathBuf,
    pub ground_truth: PathBuf,
    pub test_manifest: Option<PathBuf>,
    pub test_ground_truth: Option<PathBuf>,
}

fn write_split(
    out_dir: &Path,
    samples: impl Iterator<Item = SyntheticSample>,
    manifest_name: &str,
    truth_name: &str,
) -> Result<(PathBuf, PathBuf)> {
    let vol_dir = out_dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| DarError::io(&vol_dir, e))?;
    let mut records = Vec::new();
    let mut truth = BTreeMap::new();
    for s in samples {
        write_volume(&s.volume.volume, &out_dir.join(&s.record.volume_ref))?;
        truth.insert(s.record.id.clone(), s.true_class);
        records.push(s.record);
    }
    let manifest = out_dir.join(manifest_name);
    write_manifest(&manifest, &records)?;
    let gt = out_dir.join(truth_name);
    fs::write(&gt, serde_json::to_string_pretty(&truth)?).map_err(|e| DarError::io(&gt, e))?;
    Ok((manifest, gt))
}

/// Writes NVOL volumes, a JSONL manifest and a ground-truth sidecar
/// (`{id: true_class}`); held-out samples get their own pair of files.
pub fn gen_dataset(spec: &SyntheticSpec, model: &AnnotatorModel, out_dir: &Path) -> Result<GeneratedPaths> {
    spec.validate()?;
    model.validate()?;
    if model.q() != spec.q {
        return Err(DarError::Config(format!("annotator model has Q={}, spec Q={}", model.q(), spec.q)));
    }
    fs::create_dir_all(out_dir).map_err(|e| DarError::io(out_dir, e))?;
    let (manifest, ground_truth) =
        write_split(out_dir, generate_samples(spec, model), "manifest.jsonl", "ground_truth.json")?;
    let (test_manifest, test_ground_truth) = if spec.n_test > 0 {
        let (m, g) =
            write_split(out_dir, generate_test_samples(spec, model), "test_manifest.jsonl", "test_ground_truth.json")?;
        (Some(m), Some(g))
    } else {
        (None, None)
    };
    Ok(GeneratedPaths { manifest, ground_truth, test_manifest, test_ground_truth })
}

pub fn load_ground_truth(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = fs::read_to_string(path).map_err(|e| DarError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{load_manifest, partition_dataset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn larger_class_larger_blob() {
        let spec = SyntheticSpec::desk_default(1, 0);
        let a = gen_volume(1, &spec, &mut ChaCha8Rng::seed_from_u64(9));
        let b = gen_volume(5, &spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert!(b.radius > a.radius);
        let bright = |v: &Volume| v.voxels.iter().filter(|&&x| x > 0.3).count();
        assert!(bright(&b.volume) > bright(&a.volume));
    }

    #[test]
    fn same_seed_same_volume() {
        let spec = SyntheticSpec::desk_default(1, 0);
        let a = gen_volume(3, &spec, &mut ChaCha8Rng::seed_from_u64(4));
        let b = gen_volume(3, &spec, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a.volume, b.volume);
    }

    #[test]
    fn background_is_noise_only() {
        let spec = SyntheticSpec::desk_default(1, 0);
        for class in 1..=5 {
            let sv = gen_volume(class, &spec, &mut ChaCha8Rng::seed_from_u64(class as u64));
            let reach = spec.max_extent(class);
            let v = &sv.volume;
            for z in 0..v.dims[2] {
                for y in 0..v.dims[1] {
                    for x in 0..v.dims[0] {
                        let d = [x as i64 - sv.center[0], y as i64 - sv.center[1], z as i64 - sv.center[2]];
                        let dist = ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64).sqrt();
                        if dist > reach {
                            assert!(v.get(x, y, z).abs() as f64 <= spec.noise_amplitude + 1e-7);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn identity_confusion_reproduces_truth() {
        let model = AnnotatorModel::identity(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 1..=5 {
            assert_eq!(simulate_annotators(t, &model, &mut rng), vec![t as u8; 3]);
        }
    }

    #[test]
    fn deterministic_row() {
        let mut model = AnnotatorModel::tridiagonal(5);
        model.confusion[2] = vec![0.0, 1.0, 0.0, 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            assert!(simulate_annotators(3, &model, &mut rng).iter().all(|&s| s == 2));
        }
    }

    #[test]
    fn uniform_rows_agreement_probability() {
        // exact enumeration over 5^4 outcomes
        let q = 5usize;
        let mut agree = 0usize;
        let mut total = 0usize;
        for a in 0..q {
            for b in 0..q {
                for c in 0..q {
                    for d in 0..q {
                        total += 1;
                        if a == b && b == c && c == d {
                            agree += 1;
                        }
                    }
                }
            }
        }
        let exact = agree as f64 / total as f64;
        assert!((exact - 1.0 / 125.0).abs() < 1e-15);

        let model = AnnotatorModel {
            confusion: vec![vec![0.2; 5]; 5],
            annotator_count_dist: vec![0.0, 0.0, 0.0, 1.0],
        };
        let (cr, _, _) = model.expected_fractions(&[0.2; 5]);
        assert!((cr - exact).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 100_000;
        let hits = (0..trials)
            .filter(|_| {
                let s = simulate_annotators(2, &model, &mut rng);
                s.iter().all(|&x| x == s[0])
            })
            .count();
        let p = hits as f64 / trials as f64;
        // 5 sigma band
        let sigma = (exact * (1.0 - exact) / trials as f64).sqrt();
        assert!((p - exact).abs() < 5.0 * sigma, "empirical {p}");
    }

    #[test]
    fn default_model_is_valid_and_near_targets() {
        let spec = SyntheticSpec::desk_default(0, 0);
        let model = AnnotatorModel::tridiagonal(5);
        model.validate().unwrap();
        let (cr, ic, lr) = model.expected_fractions(&spec.class_prior);
        assert!((cr - 0.15).abs() < 0.05 && (ic - 0.55).abs() < 0.05 && (lr - 0.30).abs() < 1e-12);
    }

    #[test]
    fn empirical_fractions_match_expectation() {
        let spec = SyntheticSpec::desk_default(2000, 11);
        let model = AnnotatorModel::tridiagonal(5);
        let mut counts = [0usize; 3];
        for i in 0..spec.n_samples {
            let mut rng = rng_for(spec.seed, "sample", i as u64);
            let t = sample_class(&spec.class_prior, &mut rng);
            let s = simulate_annotators(t, &model, &mut rng);
            let idx = match crate::data_model::classify_scores(&s).unwrap() {
                crate::data_model::Subset::Cr => 0,
                crate::data_model::Subset::Ic => 1,
                crate::data_model::Subset::Lr => 2,
            };
            counts[idx] += 1;
        }
        let (cr, ic, lr) = model.expected_fractions(&spec.class_prior);
        for (c, e) in counts.iter().zip([cr, ic, lr]) {
            assert!((*c as f64 / 2000.0 - e).abs() < 0.05, "{counts:?} vs {:?}", (cr, ic, lr));
        }
    }

    fn small_spec(n: usize) -> SyntheticSpec {
        let mut spec = SyntheticSpec::desk_default(n, 5);
        spec.cube_side = 8;
        spec.geometry = (0..5)
            .map(|c| ClassGeometry {
                radius: (1.0 + 0.3 * c as f64, 1.2 + 0.3 * c as f64),
                intensity: (0.5, 0.6),
                roughness: 0.0,
            })
            .collect();
        spec.center_jitter = 0;
        spec
    }

    #[test]
    fn gen_dataset_identity_all_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(100);
        let paths = gen_dataset(&spec, &AnnotatorModel::identity(5, 3), dir.path()).unwrap();
        let records = load_manifest(&paths.manifest, 5).unwrap();
        assert_eq!(partition_dataset(&records, 5).unwrap().sizes(), (100, 0, 0));
        let truth = load_ground_truth(&paths.ground_truth).unwrap();
        assert_eq!(truth.len(), 100);
        for r in &records {
            assert_eq!(r.scores[0] as usize, truth[&r.id]);
            assert!(dir.path().join(&r.volume_ref).exists());
        }
    }

    #[test]
    fn gen_dataset_single_annotator_all_lr() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = small_spec(40);
        spec.n_test = 5;
        let model = AnnotatorModel { annotator_count_dist: vec![1.0], ..AnnotatorModel::tridiagonal(5) };
        let paths = gen_dataset(&spec, &model, dir.path()).unwrap();
        let records = load_manifest(&paths.manifest, 5).unwrap();
        assert_eq!(partition_dataset(&records, 5).unwrap().sizes(), (0, 0, 40));
        let test = load_manifest(paths.test_manifest.as_ref().unwrap(), 5).unwrap();
        assert_eq!(test.len(), 5);
        assert!(test[0].id.starts_with('t'));
    }
}
