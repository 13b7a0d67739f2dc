//! Annotation records, the consistency-based divide rule and label encodings.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DarError, Result};

/// Number of malignancy levels used when nothing else is configured.
pub const DEFAULT_Q: usize = 5;

/// One annotated sample: where its volume lives and what each annotator said.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    /// Path to the volume, relative to the manifest it came from.
    #[serde(rename = "volume")]
    pub volume_ref: PathBuf,
    /// Per-annotator scores, each in `1..=Q`. Duplicates are meaningful.
    #[serde(rename = "annotations")]
    pub scores: Vec<u8>,
    pub center: [i64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    OneHot,
    Candidate,
    Complement,
}

impl LabelKind {
    pub fn name(self) -> &'static str {
        match self {
            LabelKind::OneHot => "onehot",
            LabelKind::Candidate => "candidate",
            LabelKind::Complement => "complement",
        }
    }
}

/// A Q-dimensional binary vector together with what it encodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    pub values: Vec<f64>,
    pub kind: LabelKind,
}

impl LabelVector {
    /// One-hot vector for a 1-based class.
    pub fn onehot(class: usize, q: usize) -> Self {
        debug_assert!((1..=q).contains(&class));
        let mut values = vec![0.0; q];
        values[class - 1] = 1.0;
        Self { values, kind: LabelKind::OneHot }
    }

    /// Candidate mask marking every class some annotator gave.
    pub fn candidate(scores: &[u8], q: usize) -> Self {
        let mut values = vec![0.0; q];
        for &s in scores {
            values[s as usize - 1] = 1.0;
        }
        Self { values, kind: LabelKind::Candidate }
    }

    pub fn q(&self) -> usize {
        self.values.len()
    }

    /// 1-based class of a one-hot vector.
    pub fn class(&self) -> Option<usize> {
        if self.kind != LabelKind::OneHot {
            return None;
        }
        self.values.iter().position(|&v| v == 1.0).map(|i| i + 1)
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    fn expect_kind(&self, kind: LabelKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(DarError::WrongKind { expected: kind.name(), found: self.kind.name() })
        }
    }
}

/// Elementwise `1 - candidate`: the classes no annotator chose.
pub fn encode_complement(candidate: &LabelVector) -> Result<LabelVector> {
    candidate.expect_kind(LabelKind::Candidate)?;
    Ok(LabelVector {
        values: candidate.values.iter().map(|v| 1.0 - v).collect(),
        kind: LabelKind::Complement,
    })
}

/// Complement of a one-hot label: the `Q - 1` wrong classes.
pub fn onehot_complement(onehot: &LabelVector) -> Result<LabelVector> {
    onehot.expect_kind(LabelKind::OneHot)?;
    Ok(LabelVector {
        values: onehot.values.iter().map(|v| 1.0 - v).collect(),
        kind: LabelKind::Complement,
    })
}

/// Rounded mean score in `1..=Q`; exact halves round up.
pub fn mean_proxy_label(scores: &[u8], q: usize) -> Result<usize> {
    if scores.is_empty() {
        return Err(DarError::EmptyScores { id: String::new() });
    }
    // mean = sum / n; round half up == floor((2*sum + n) / (2*n)) in integers
    let sum: usize = scores.iter().map(|&s| s as usize).sum();
    let n = scores.len();
    let rounded = (2 * sum + n) / (2 * n);
    Ok(rounded.clamp(1, q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedDataset {
    pub q: usize,
    pub cr: Vec<(AnnotationRecord, LabelVector)>,
    pub ic: Vec<(AnnotationRecord, LabelVector)>,
    pub lr: Vec<(AnnotationRecord, LabelVector)>,
}

impl PartitionedDataset {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.cr.len(), self.ic.len(), self.lr.len())
    }

    pub fn summary(&self) -> PartitionSummary {
        PartitionSummary { cr: self.cr.len(), ic: self.ic.len(), lr: self.lr.len() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub cr: usize,
    pub ic: usize,
    pub lr: usize,
}

/// Which subset the divide rule sends a score list to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Cr,
    Ic,
    Lr,
}

pub fn classify_scores(scores: &[u8]) -> Option<Subset> {
    match scores {
        [] => None,
        [_] => Some(Subset::Lr),
        [first, rest @ ..] if rest.iter().all(|s| s == first) => Some(Subset::Cr),
        _ => Some(Subset::Ic),
    }
}

pub fn partition_dataset(records: &[AnnotationRecord], q: usize) -> Result<PartitionedDataset> {
    let mut out = PartitionedDataset { q, cr: Vec::new(), ic: Vec::new(), lr: Vec::new() };
    for (i, rec) in records.iter().enumerate() {
        if let Some(&bad) = rec.scores.iter().find(|&&s| s == 0 || s as usize > q) {
            return Err(DarError::ScoreOutOfRange { line: i + 1, score: bad as i64, q });
        }
        match classify_scores(&rec.scores) {
            None => return Err(DarError::EmptyScores { id: rec.id.clone() }),
            Some(Subset::Lr) | Some(Subset::Cr) => {
                let label = LabelVector::onehot(rec.scores[0] as usize, q);
                if rec.scores.len() == 1 {
                    out.lr.push((rec.clone(), label));
                } else {
                    out.cr.push((rec.clone(), label));
                }
            }
            Some(Subset::Ic) => {
                out.ic.push((rec.clone(), LabelVector::candidate(&rec.scores, q)));
            }
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    volume: Option<String>,
    annotations: Option<Vec<i64>>,
    center: Option<[i64; 3]>,
}

/// Parse JSON Lines manifest text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_manifest(text: &str, q: usize) -> Result<Vec<AnnotationRecord>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line)
            .map_err(|e| DarError::Parse { line: line_no, message: e.to_string() })?;
        let missing = |key: &str| DarError::Parse { line: line_no, message: format!("missing key {key:?}") };
        let id = raw.id.ok_or_else(|| missing("id"))?;
        let volume = raw.volume.ok_or_else(|| missing("volume"))?;
        let annotations = raw.annotations.ok_or_else(|| missing("annotations"))?;
        let center = raw.center.ok_or_else(|| missing("center"))?;
        if annotations.is_empty() {
            return Err(DarError::EmptyScores { id });
        }
        let mut scores = Vec::with_capacity(annotations.len());
        for s in annotations {
            if s < 1 || s as usize > q {
                return Err(DarError::ScoreOutOfRange { line: line_no, score: s, q });
            }
            scores.push(s as u8);
        }
        if !seen.insert(id.clone()) {
            return Err(DarError::DuplicateId { line: line_no, id });
        }
        records.push(AnnotationRecord { id, volume_ref: PathBuf::from(volume), scores, center });
    }
    Ok(records)
}

pub fn load_manifest(path: &Path, q: usize) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| DarError::io(path, e))?;
    parse_manifest(&text, q)
}

pub fn manifest_line(record: &AnnotationRecord) -> String {
    serde_json::to_string(record).expect("record serializes")
}

pub fn write_manifest(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&manifest_line(r));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| DarError::io(path, e))
}
