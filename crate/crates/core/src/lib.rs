//! Divide-and-rule learning from ambiguously annotated volumetric data.
//!
//! Samples are split by annotation consistency into consistent (CR),
//! inconsistent (IC) and single-rater (LR) subsets. Three sibling networks
//! learn from those subsets with subset-specific losses, and attention
//! modules transfer the counterfactual and low-reliability representations
//! into the prediction network. Three orthogonal views are fused at the end.

pub mod attention;
pub mod checkpoint;
pub mod dar;
pub mod data_model;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod prep;
pub mod report;
pub mod seed;
pub mod stats;
pub mod synth;
pub mod train;
pub mod viz;
pub mod volume;

pub use data_model::{
    encode_complement, load_manifest, mean_proxy_label, partition_dataset, AnnotationRecord, LabelKind,
    LabelVector, PartitionedDataset,
};
pub use error::{DarError, Result};
pub use volume::{read_volume, write_volume, Patch, PatchTriplet, View, Volume};
pub use dar::{DarModel, Fusion, MvModel, Role, ViewNet};
pub use metrics::{evaluate, MetricsReport};
pub use nn::{BackboneSpec, FeatureMap, Network};
pub use objectives::LossConfig;
pub use pipeline::{Example, MetricSummary, Split};
pub use prep::PrepConfig;
pub use synth::{AnnotatorModel, SyntheticSpec};
pub use train::TrainConfig;
