//! Seeded experiment grid: sample, build, train, pick α, evaluate, then
//! aggregate over repeats.

mod pipeline;
mod report;

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use pipeline::{
    build_models, evaluate_models, init_prior, predict_branches, run_variant, select_alpha,
    variant_train_config, AlphaChoice, Selection, VariantOutcome,
};
pub use report::{emit_report, load_table_csv, ReportFormat, ReportTable, TableRow, VariantStats};

use crate::cache::DEFAULT_BETA;
use crate::encoder::{resolve_source, EmbeddingSource, SourceConfig};
use crate::error::{Error, Result};
use crate::fusion::{EvalReport, Pooling};
use crate::prior::{PriorMode, DEFAULT_LEARNABLE_TOKENS, DEFAULT_TAU, DEFAULT_TOKEN_WIDTH};
use crate::sampler::{FewShotSpec, FewShotSplit};
use crate::trainer::TrainConfig;

pub const DEFAULT_REPEATS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaSelection {
    /// Leave-self-out predictions on the labeled training instances.
    #[default]
    TrainLabeled,
    /// Instances of the training bags that were not sampled.
    HeldOut,
    /// Always the configured α.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub alpha: f64,
    pub selection: AlphaSelection,
    pub pooling: Pooling,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            selection: AlphaSelection::TrainLabeled,
            pooling: Pooling::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub mode: PriorMode,
    pub tau: f64,
    pub learnable_tokens: usize,
    pub token_width: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            mode: PriorMode::Prototype,
            tau: DEFAULT_TAU,
            learnable_tokens: DEFAULT_LEARNABLE_TOKENS,
            token_width: DEFAULT_TOKEN_WIDTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    pub beta: f64,
    /// Let the labeled value rows learn too.
    pub unfreeze_labels: bool,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            unfreeze_labels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub coreset_fraction: f64,
    pub coreset_cap: usize,
    pub per_bag: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let s = FewShotSpec::default();
        Self {
            coreset_fraction: s.coreset_fraction,
            coreset_cap: s.coreset_cap,
            per_bag: s.per_bag,
        }
    }
}

/// Which parts of the model take part in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub cache_only: bool,
    pub prior_only: bool,
    pub freeze_keys: bool,
    pub freeze_value_logits: bool,
    /// Cache only the labeled instances, leaving out the unlabeled core set.
    pub labeled_only: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    #[serde(flatten)]
    pub ablation: Ablation,
}

impl Variant {
    pub fn new(name: &str, ablation: Ablation) -> Self {
        Self {
            name: name.to_string(),
            ablation,
        }
    }

    pub fn full() -> Self {
        Self::new("full", Ablation::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub source: SourceConfig,
    pub bag_shots: Vec<usize>,
    pub instance_shots: Vec<usize>,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub prior: PriorConfig,
    pub cache: CacheConfig,
    pub variants: Vec<Variant>,
    pub repeats: usize,
    pub base_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: SourceConfig::default(),
            bag_shots: vec![1, 2, 4, 8, 16],
            instance_shots: vec![16],
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            fusion: FusionConfig::default(),
            prior: PriorConfig::default(),
            cache: CacheConfig::default(),
            variants: vec![Variant::full()],
            repeats: DEFAULT_REPEATS,
            base_seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config; relative paths inside it resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_reader(crate::error::open(path)?)?;
        let mut cfg = Self::from_value(v)?;
        cfg.source.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn from_value(mut v: serde_json::Value) -> Result<Self> {
        let source = match v.as_object_mut().and_then(|o| o.remove("source")) {
            Some(s) => SourceConfig::from_value(s)?,
            None => SourceConfig::default(),
        };
        let mut cfg: Self = serde_json::from_value(v)?;
        cfg.source = source;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.repeats == 0 {
            return bad("repeats must be >= 1".into());
        }
        if self.bag_shots.is_empty() || self.instance_shots.is_empty() {
            return bad("shot grids must be non-empty".into());
        }
        if self.bag_shots.contains(&0) || self.instance_shots.contains(&0) {
            return bad("shots must be >= 1".into());
        }
        if self.variants.is_empty() {
            return bad("at least one variant is required".into());
        }
        let mut names = std::collections::HashSet::new();
        for v in &self.variants {
            if v.name.is_empty()
                || !v
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return bad(format!("variant name {:?} must be [A-Za-z0-9_-]+", v.name));
            }
            if !names.insert(&v.name) {
                return bad(format!("duplicate variant {}", v.name));
            }
            if v.ablation.cache_only && v.ablation.prior_only {
                return bad(format!("variant {} disables both branches", v.name));
            }
        }
        if !(0.0..=1.0).contains(&self.fusion.alpha) {
            return bad(format!("fusion alpha {} outside [0, 1]", self.fusion.alpha));
        }
        self.train.validate()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.repeats as u64).map(move |r| self.base_seed + r)
    }

    pub fn few_shot_spec(&self, bag_shot: usize, instance_shot: usize, seed: u64) -> FewShotSpec {
        FewShotSpec {
            bag_shot,
            instance_shot,
            coreset_fraction: self.sampler.coreset_fraction,
            coreset_cap: self.sampler.coreset_cap,
            seed,
            per_bag: self.sampler.per_bag,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub report: EvalReport,
    pub final_loss: Option<f64>,
    /// Inputs of the α search, kept in memory for auditing.
    #[serde(skip)]
    pub selection: Option<Selection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub bag_shot: usize,
    pub instance_shot: usize,
    pub repeat: usize,
    pub seed: u64,
    pub labeled: usize,
    pub total_train_instances: usize,
    pub shortfall: Vec<String>,
    pub absent_classes: Vec<String>,
    pub results: Vec<VariantResult>,
    /// `code: message` when any stage of this cell failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub source_checksum: String,
    pub variants: Vec<String>,
    pub cells: Vec<CellRecord>,
    pub table: ReportTable,
    /// SHA-256 of everything above.
    pub hash: String,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn reports(
        &self,
        bag_shot: usize,
        instance_shot: usize,
        variant: &str,
    ) -> Vec<&EvalReport> {
        self.cells
            .iter()
            .filter(|c| c.bag_shot == bag_shot && c.instance_shot == instance_shot)
            .flat_map(|c| {
                c.results
                    .iter()
                    .filter(|r| r.variant == variant)
                    .map(|r| &r.report)
            })
            .collect()
    }

    fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_hash.as_bytes());
        h.update(self.source_checksum.as_bytes());
        h.update(serde_json::to_vec(&self.variants).expect("serializes"));
        h.update(serde_json::to_vec(&self.cells).expect("serializes"));
        h.update(serde_json::to_vec(&self.table).expect("serializes"));
        hex::encode(h.finalize())
    }
}

fn run_cell(
    cfg: &ExperimentConfig,
    src: &EmbeddingSource,
    (bag_shot, instance_shot, repeat): (usize, usize, usize),
) -> CellRecord {
    let seed = cfg.base_seed + repeat as u64;
    let mut cell = CellRecord {
        bag_shot,
        instance_shot,
        repeat,
        seed,
        labeled: 0,
        total_train_instances: src.train.num_instances(),
        shortfall: vec![],
        absent_classes: vec![],
        results: vec![],
        error: None,
    };
    let outcome = (|| -> Result<(FewShotSplit, Vec<VariantResult>)> {
        let split = crate::sampler::few_shot_split(
            &src.train,
            &cfg.few_shot_spec(bag_shot, instance_shot, seed),
        )?;
        let results = cfg
            .variants
            .iter()
            .map(|v| {
                let out = run_variant(cfg, src, &split, v, seed)?;
                Ok(VariantResult {
                    variant: v.name.clone(),
                    report: out.report,
                    final_loss: out.final_loss,
                    selection: out.selection,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((split, results))
    })();
    match outcome {
        Ok((split, results)) => {
            cell.labeled = split.num_labeled();
            cell.shortfall = split
                .shortfall
                .iter()
                .map(|s| format!("{}: {}/{}", s.scope, s.available, s.requested))
                .collect();
            cell.absent_classes = split.absent_classes;
            cell.results = results;
        }
        Err(e) => cell.error = Some(format!("{}: {e}", e.code())),
    }
    cell
}

/// Runs every (bag shot, instance shot, repeat) cell. Cells run in
/// parallel and are collected in grid order; a failing cell is recorded
/// and does not affect its siblings.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let src = resolve_source(&cfg.source)?;
    if src.test.is_none() {
        return Err(Error::InvalidInput(
            "experiment needs a test dataset".into(),
        ));
    }
    let grid: Vec<(usize, usize, usize)> = cfg
        .bag_shots
        .iter()
        .flat_map(|&b| {
            cfg.instance_shots
                .iter()
                .flat_map(move |&i| (0..cfg.repeats).map(move |r| (b, i, r)))
        })
        .collect();
    let cells: Vec<CellRecord> = grid
        .par_iter()
        .map(|&key| run_cell(cfg, &src, key))
        .collect();
    let variants: Vec<String> = cfg.variants.iter().map(|v| v.name.clone()).collect();
    let table = ReportTable::aggregate(cfg, &variants, &cells, src.train.num_instances());
    let mut record = RunRecord {
        config_hash: cfg.hash(),
        source_checksum: src.checksum.clone(),
        variants,
        cells,
        table,
        hash: String::new(),
        wall_clock_secs: 0.0,
    };
    record.hash = record.content_hash();
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SynthSpec;
    use crate::encoder::SyntheticPrompts;

    pub(crate) fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            source: SourceConfig::Synthetic {
                spec: SynthSpec {
                    bags_per_class: 4,
                    instances_per_bag: 50,
                    noise_sigma: 0.3,
                    ..SynthSpec::default()
                },
                test_bags_per_class: 2,
                prompts: Some(SyntheticPrompts {
                    noise: 0.2,
                    seed: 1,
                }),
            },
            bag_shots: vec![1, 2],
            instance_shots: vec![4],
            train: TrainConfig {
                steps: 20,
                ..TrainConfig::default()
            },
            variants: vec![
                Variant::full(),
                Variant::new(
                    "cache_only",
                    Ablation {
                        cache_only: true,
                        ..Ablation::default()
                    },
                ),
                Variant::new(
                    "prior_only",
                    Ablation {
                        prior_only: true,
                        ..Ablation::default()
                    },
                ),
            ],
            repeats: 3,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn repeats_give_one_report_per_seed() {
        let cfg = small_config();
        let rec = run_experiment(&cfg).unwrap();
        assert_eq!(rec.cells.len(), 2 * 3);
        for b in [1, 2] {
            assert_eq!(rec.reports(b, 4, "full").len(), 3);
        }
        let seeds: Vec<u64> = rec.cells.iter().take(3).map(|c| c.seed).collect();
        assert_eq!(seeds, vec![0, 1, 2]);
        for c in &rec.cells {
            assert!(c.error.is_none(), "{:?}", c.error);
            for r in &c.results {
                match r.variant.as_str() {
                    "cache_only" => assert_eq!(
                        (r.report.alpha, r.report.alpha_source.as_str()),
                        (1.0, "forced")
                    ),
                    "prior_only" => assert_eq!(
                        (r.report.alpha, r.report.alpha_source.as_str()),
                        (0.0, "forced")
                    ),
                    _ => assert!((0.0..=1.0).contains(&r.report.alpha)),
                }
            }
        }
    }

    #[test]
    fn rerun_has_identical_hash() {
        let cfg = small_config();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_eq!(a.cells, b.cells);
        let other = ExperimentConfig {
            base_seed: 7,
            ..cfg
        };
        assert_ne!(run_experiment(&other).unwrap().hash, a.hash);
    }

    #[test]
    fn failing_cell_leaves_siblings_intact() {
        let mut cfg = small_config();
        // 5 bags per class do not exist; only 4 were generated
        cfg.bag_shots = vec![1, 5];
        let rec = run_experiment(&cfg).unwrap();
        let (bad, good): (Vec<_>, Vec<_>) = rec.cells.iter().partition(|c| c.bag_shot == 5);
        assert!(bad
            .iter()
            .all(|c| c.error.as_deref().unwrap().starts_with("insufficient-bags")));
        assert!(good
            .iter()
            .all(|c| c.error.is_none() && c.results.len() == 3));

        let solo = run_experiment(&ExperimentConfig {
            bag_shots: vec![1],
            ..cfg
        })
        .unwrap();
        assert_eq!(solo.cells, good.into_iter().cloned().collect::<Vec<_>>());
    }

    #[test]
    fn labeled_only_cache_holds_just_the_labels() {
        let cfg = small_config();
        let src = resolve_source(&cfg.source).unwrap();
        let split =
            crate::sampler::few_shot_split(&src.train, &cfg.few_shot_spec(2, 4, 0)).unwrap();
        assert!(!split.unlabeled_core.is_empty());
        let v = Variant::new(
            "tip",
            Ablation {
                cache_only: true,
                freeze_keys: true,
                freeze_value_logits: true,
                labeled_only: true,
                ..Ablation::default()
            },
        );
        let out = run_variant(&cfg, &src, &split, &v, 0).unwrap();
        assert_eq!(out.cache.keys.rows(), split.num_labeled());
        assert!(out.cache.labeled_mask.iter().all(|&l| l));
        let (fresh, _) = build_models(&cfg, &src, &split, 0).unwrap();
        assert_eq!(
            out.cache.keys,
            fresh
                .keys
                .select_rows(&(0..split.num_labeled()).collect::<Vec<_>>())
        );
    }

    #[test]
    fn config_validation_and_json() {
        let v = serde_json::json!({
            "source": {"kind": "synthetic", "spec": {"bags_per_class": 2}},
            "repeats": 2,
            "variants": [{"name": "c", "cache_only": true}]
        });
        let cfg = ExperimentConfig::from_value(v).unwrap();
        assert_eq!(cfg.repeats, 2);
        assert!(cfg.variants[0].ablation.cache_only);
        assert_eq!(cfg.bag_shots, vec![1, 2, 4, 8, 16]);

        let bad = serde_json::json!({"repeats": 0});
        assert!(ExperimentConfig::from_value(bad).is_err());
        let bad = serde_json::json!({"source": {"kind": "camera"}});
        assert!(matches!(
            ExperimentConfig::from_value(bad),
            Err(Error::Unknown { .. })
        ));
        let bad = serde_json::json!({"variants": [{"name": "x", "cache_only": true, "prior_only": true}]});
        assert!(ExperimentConfig::from_value(bad).is_err());
    }
}
