use rand_distr::{Distribution, StandardNormal};

use super::{Ablation, AlphaSelection, ExperimentConfig, FusionConfig, PriorConfig, Variant};
use crate::cache::{build_cache, CacheModel};
use crate::dataset::Dataset;
use crate::encoder::{EmbeddingSource, Prompts};
use crate::error::{Error, Result};
use crate::fusion::{alpha_grid, evaluate, fuse, sweep_alpha, AlphaSweep, EvalReport, Pooling};
use crate::numerics::Matrix;
use crate::prior::{PriorMode, PriorModel};
use crate::rng;
use crate::sampler::FewShotSplit;
use crate::trainer::{train, TrainConfig};

/// Rows scored per retrieval call, bounding the attention buffer.
const CHUNK: usize = 1024;

/// Prior branch for one run. Prototype mode starts from the prompt
/// features when available and from random directions otherwise; toy
/// mode uses the prompt token sequences or one random token per class.
pub fn init_prior(cfg: &PriorConfig, src: &EmbeddingSource, seed: u64) -> Result<PriorModel> {
    let k = src.train.num_classes();
    let normal = |rows: usize, cols: usize, stream: u64| {
        let mut r = rng::stream(seed, stream);
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut r))
            .collect();
        Matrix::new(rows, cols, data)
    };
    match (cfg.mode, &src.prompts) {
        (PriorMode::Prototype, Some(Prompts::Features(f))) => {
            PriorModel::prototype(f.clone(), cfg.tau)
        }
        (PriorMode::Prototype, None) => PriorModel::prototype(normal(k, src.dim, 5)?, cfg.tau),
        (PriorMode::ToyEncoder, Some(Prompts::Tokens(t))) => PriorModel::toy_encoder(
            t.clone(),
            src.dim,
            cfg.learnable_tokens,
            rng::derive_seed(seed, 7),
            cfg.tau,
        ),
        (PriorMode::ToyEncoder, None) => {
            let base = (0..k)
                .map(|c| normal(1, cfg.token_width, 100 + c as u64))
                .collect::<Result<Vec<_>>>()?;
            PriorModel::toy_encoder(
                base,
                src.dim,
                cfg.learnable_tokens,
                rng::derive_seed(seed, 7),
                cfg.tau,
            )
        }
        (mode, Some(_)) => Err(Error::InvalidInput(format!(
            "prompt file does not fit the {mode} prior"
        ))),
    }
}

pub fn build_models(
    cfg: &ExperimentConfig,
    src: &EmbeddingSource,
    split: &FewShotSplit,
    seed: u64,
) -> Result<(CacheModel, PriorModel)> {
    let mut cache = build_cache(
        split,
        &src.train.store,
        src.train.num_classes(),
        cfg.cache.beta,
    )?;
    if cfg.cache.unfreeze_labels {
        cache.unfreeze_labels();
    }
    Ok((cache, init_prior(&cfg.prior, src, seed)?))
}

/// Cache and prior probabilities for `queries`, computed in chunks.
pub fn predict_branches(
    cache: &CacheModel,
    prior: &PriorModel,
    queries: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let k = cache.num_classes();
    let mut c = Matrix::zeros(queries.rows(), k);
    let mut p = Matrix::zeros(queries.rows(), k);
    for start in (0..queries.rows()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(queries.rows())).collect();
        let q = queries.select_rows(&idx);
        let cp = cache.retrieve(&q)?.probs;
        let pp = prior.predict(&q)?;
        for (j, &i) in idx.iter().enumerate() {
            c.row_mut(i).copy_from_slice(cp.row(j));
            p.row_mut(i).copy_from_slice(pp.row(j));
        }
    }
    Ok((c, p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaChoice {
    pub alpha: f64,
    /// `forced`, `fixed`, `train-labeled`, `held-out` or `fallback`.
    pub source: String,
}

/// The branch predictions and labels α was chosen on.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub cache_probs: Matrix,
    pub prior_probs: Matrix,
    pub labels: Vec<usize>,
    pub grid: Vec<f64>,
    pub sweep: Option<AlphaSweep>,
}

fn choice(alpha: f64, source: &str) -> AlphaChoice {
    AlphaChoice {
        alpha,
        source: source.to_string(),
    }
}

/// Picks the fusion weight. Labeled instances are scored without their
/// own cache entry; when the selection labels hold a single class the
/// configured α is used and the choice is marked `fallback`.
pub fn select_alpha(
    fusion: &FusionConfig,
    ablation: &Ablation,
    cache: &CacheModel,
    prior: &PriorModel,
    train_ds: &Dataset,
    split: &FewShotSplit,
) -> Result<(AlphaChoice, Option<Selection>)> {
    if ablation.cache_only {
        return Ok((choice(1.0, "forced"), None));
    }
    if ablation.prior_only {
        return Ok((choice(0.0, "forced"), None));
    }
    let (cache_probs, prior_probs, labels, name) = match fusion.selection {
        AlphaSelection::Fixed => return Ok((choice(fusion.alpha, "fixed"), None)),
        AlphaSelection::TrainLabeled => {
            let q = train_ds.store.rows.select_rows(&split.labeled_rows());
            // labeled instances occupy the first cache rows, in split order
            let exclude: Vec<Option<usize>> = (0..q.rows()).map(Some).collect();
            let c = cache.retrieve_excluding(&q, &exclude)?.probs;
            (c, prior.predict(&q)?, split.labels(), "train-labeled")
        }
        AlphaSelection::HeldOut => {
            let row_labels = train_ds.row_labels().ok_or_else(|| {
                Error::InvalidInput("held-out selection needs instance labels".into())
            })?;
            let rows: Vec<usize> = train_ds
                .bags
                .iter()
                .filter(|b| !split.selected_bags.contains(&b.id))
                .flat_map(|b| b.range())
                .collect();
            let labels = rows
                .iter()
                .map(|&r| row_labels[r].expect("labeled dataset"))
                .collect();
            let (c, p) = predict_branches(cache, prior, &train_ds.store.rows.select_rows(&rows))?;
            (c, p, labels, "held-out")
        }
    };
    let grid = alpha_grid();
    let (alpha, sweep) = match sweep_alpha(&cache_probs, &prior_probs, &labels, &grid) {
        Ok(s) => (choice(s.best_alpha, name), Some(s)),
        Err(Error::UndefinedMetric(_)) => (choice(fusion.alpha, "fallback"), None),
        Err(e) => return Err(e),
    };
    Ok((
        alpha,
        Some(Selection {
            cache_probs,
            prior_probs,
            labels,
            grid,
            sweep,
        }),
    ))
}

pub fn evaluate_models(
    cache: &CacheModel,
    prior: &PriorModel,
    alpha: &AlphaChoice,
    ds: &Dataset,
    pooling: Pooling,
    seed: u64,
) -> Result<EvalReport> {
    let (c, p) = predict_branches(cache, prior, &ds.store.rows)?;
    let fused = fuse(&c, &p, alpha.alpha)?;
    evaluate(ds, &fused, pooling, alpha.alpha, &alpha.source, seed)
}

pub fn variant_train_config(base: &TrainConfig, ablation: &Ablation, seed: u64) -> TrainConfig {
    let mut tc = base.clone();
    tc.seed = rng::derive_seed(seed, 4);
    tc.freeze_keys |= ablation.freeze_keys || ablation.prior_only;
    tc.freeze_value_logits |= ablation.freeze_value_logits || ablation.prior_only;
    tc.freeze_prompt |= ablation.cache_only;
    tc
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub cache: CacheModel,
    pub prior: PriorModel,
    pub alpha: AlphaChoice,
    pub report: EvalReport,
    pub final_loss: Option<f64>,
    pub selection: Option<Selection>,
}

/// Build, train, pick α and evaluate on the source's test set.
pub fn run_variant(
    cfg: &ExperimentConfig,
    src: &EmbeddingSource,
    split: &FewShotSplit,
    variant: &Variant,
    seed: u64,
) -> Result<VariantOutcome> {
    let test = src
        .test
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("no test dataset to evaluate on".into()))?;
    let labeled_only;
    let split = if variant.ablation.labeled_only {
        labeled_only = FewShotSplit {
            unlabeled_core: Vec::new(),
            ..split.clone()
        };
        &labeled_only
    } else {
        split
    };
    let (cache, prior) = build_models(cfg, src, split, seed)?;
    let tc = variant_train_config(&cfg.train, &variant.ablation, seed);
    let (cache, prior, state) = train(cache, prior, split, &src.train.store, &tc)?;
    let (alpha, selection) = select_alpha(
        &cfg.fusion,
        &variant.ablation,
        &cache,
        &prior,
        &src.train,
        split,
    )?;
    let report = evaluate_models(&cache, &prior, &alpha, test, cfg.fusion.pooling, seed)?;
    Ok(VariantOutcome {
        cache,
        prior,
        alpha,
        report,
        final_loss: state.final_loss(),
        selection,
    })
}
