//! Few-shot instance classification over bags of precomputed embeddings.
//!
//! Two branches score every instance: a key-value cache built from a small
//! labeled set plus a k-means core set of unlabeled instances, and a prior
//! that compares instances with per-class text features. Their class
//! probabilities are mixed with a weight chosen on the labeled data.

pub mod cache;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod numerics;
pub mod prior;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use cache::{build_cache, CacheModel, CachePrediction};
pub use dataset::{
    load_manifest, save_dataset, synth_generate, Bag, Dataset, EmbeddingStore, SynthSpec,
};
pub use encoder::{resolve_source, EmbeddingSource, Prompts, SourceConfig};
pub use error::{Error, Result};
pub use fusion::{
    auc, bag_auc, bag_pool, fuse, instance_auc, sweep_alpha, ClassAuc, EvalReport, Pooling,
};
pub use harness::{
    emit_report, run_experiment, ExperimentConfig, ReportFormat, RunRecord, Variant,
};
pub use numerics::Matrix;
pub use prior::{PriorMode, PriorModel};
pub use sampler::{few_shot_split, FewShotSpec, FewShotSplit};
pub use trainer::{train, TrainConfig, TrainState};
