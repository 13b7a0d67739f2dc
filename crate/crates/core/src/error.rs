use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DarError>;

#[derive(Debug, Error)]
pub enum DarError {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: score {score} outside 1..={q}")]
    ScoreOutOfRange { line: usize, score: i64, q: usize },
    #[error("record {id:?} has no annotator scores")]
    EmptyScores { id: String },
    #[error("expected a {expected} label vector, got {found}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("bad magic {found:?}, expected \"NVOL\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported volume version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("volume dimensions {0:?} overflow the addressable voxel count")]
    DimensionOverflow([u32; 3]),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("center {center:?} outside volume of dims {dims:?}")]
    CenterOutOfBounds { center: [i64; 3], dims: [usize; 3] },
    #[error("expected a cubic volume, got dims {0:?}")]
    NonCubic([usize; 3]),
    #[error("expected a square patch, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("invalid intensity window: lo {lo} must be below hi {hi}")]
    InvalidWindow { lo: f32, hi: f32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch size mismatch: {pred} predictions vs {labels} labels")]
    BatchMismatch { pred: usize, labels: usize },
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("empty training subset for {0}")]
    EmptySubset(String),
    #[error("backbone spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("view mismatch: {0}")]
    ViewMismatch(String),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("cannot split {samples} samples into {folds} folds")]
    FoldSize { samples: usize, folds: usize },
    #[error("paired samples differ in length ({a} vs {b}) or are shorter than 2")]
    LengthMismatch { a: usize, b: usize },
    #[error("block {block} outside transferred range {k}..={m}")]
    BlockOutOfRange { block: usize, k: usize, m: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl DarError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DarError::Io { path: path.into(), source }
    }
}
