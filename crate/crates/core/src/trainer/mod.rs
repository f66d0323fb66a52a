//! Joint optimization of the cache keys, the learnable value rows and the
//! prompt parameters under the summed cache and text losses.

mod checkpoint;

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, restore, save_checkpoint, snapshot, CHECKPOINT_VERSION};

use crate::cache::CacheModel;
use crate::dataset::EmbeddingStore;
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState};
use crate::prior::PriorModel;
use crate::rng;
use crate::sampler::FewShotSplit;

pub const MAX_BATCH: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cache: f64,
    pub text: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cache: 1.0,
            text: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_keys: f64,
    pub lr_value_logits: f64,
    pub lr_prompt: f64,
    /// `None` means `min(4096, labeled count)`.
    pub batch_size: Option<usize>,
    pub steps: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub freeze_keys: bool,
    pub freeze_value_logits: bool,
    /// Leaves the prompt parameters untouched.
    pub freeze_prompt: bool,
    /// A labeled query does not attend to its own cache entry in the cache
    /// loss.
    pub exclude_self: bool,
    pub adam: AdamParams,
}

/// Serializable mirror of [`AdamConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        let c = AdamConfig::default();
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

impl From<AdamParams> for AdamConfig {
    fn from(p: AdamParams) -> Self {
        AdamConfig {
            beta1: p.beta1,
            beta2: p.beta2,
            eps: p.eps,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_keys: 0.001,
            lr_value_logits: 0.01,
            lr_prompt: 0.001,
            batch_size: None,
            steps: 2000,
            seed: 0,
            loss_weights: LossWeights::default(),
            freeze_keys: false,
            freeze_value_logits: false,
            freeze_prompt: false,
            exclude_self: true,
            adam: AdamParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(crate::error::open(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learning rates must be finite and non-negative; a zero rate freezes
    /// its group.
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_keys", self.lr_keys),
            ("lr_value_logits", self.lr_value_logits),
            ("lr_prompt", self.lr_prompt),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be finite and >= 0, got {lr}"
                )));
            }
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        let w = self.loss_weights;
        if !(w.cache.is_finite() && w.text.is_finite() && w.cache >= 0.0 && w.text >= 0.0) {
            return Err(Error::InvalidInput(
                "loss weights must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn effective_batch(&self, labeled: usize) -> usize {
        self.batch_size.unwrap_or_else(|| labeled.min(MAX_BATCH))
    }

    fn keys_active(&self) -> bool {
        !self.freeze_keys && self.lr_keys > 0.0
    }

    fn values_active(&self) -> bool {
        !self.freeze_value_logits && self.lr_value_logits > 0.0
    }

    fn prompt_active(&self) -> bool {
        !self.freeze_prompt && self.lr_prompt > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub cache_loss: f64,
    pub text_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub keys: AdamState,
    pub value_logits: AdamState,
    pub prompt: AdamState,
    /// One record per completed step, losses measured before the update.
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn write_history(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.history {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.total)
    }
}

/// Minibatch positions into `split.labeled`: without replacement when the
/// pool covers the batch, with replacement otherwise.
fn draw_batch(rng: &mut impl Rng, pool: usize, batch: usize) -> Vec<usize> {
    if pool >= batch {
        let mut b = index::sample(rng, pool, batch).into_vec();
        b.sort_unstable();
        b
    } else {
        (0..batch).map(|_| rng.random_range(0..pool)).collect()
    }
}

/// Runs `cfg.steps` joint Adam steps. Queries are the labeled instances'
/// own embeddings. Groups that are frozen or have a zero learning rate are
/// never touched, so they come back bit-identical.
pub fn train(
    mut cache: CacheModel,
    mut prior: PriorModel,
    split: &FewShotSplit,
    store: &EmbeddingStore,
    cfg: &TrainConfig,
) -> Result<(CacheModel, PriorModel, TrainState)> {
    cfg.validate()?;
    if split.labeled.is_empty() {
        return Err(Error::InvalidInput(
            "training needs at least one labeled instance".into(),
        ));
    }
    if cache.dim() != store.d() || prior.dim() != store.d() {
        return Err(Error::DimConflict {
            instances: store.d(),
            prompts: if prior.dim() != store.d() {
                prior.dim()
            } else {
                cache.dim()
            },
        });
    }
    if cfg.exclude_self
        && cache.labeled_mask.iter().take_while(|&&l| l).count() != split.labeled.len()
    {
        return Err(Error::InvalidInput(
            "cache does not start with the split's labeled rows".into(),
        ));
    }
    let adam: AdamConfig = cfg.adam.into();
    let rows = split.labeled_rows();
    let labels = split.labels();
    let batch = cfg.effective_batch(rows.len());
    let mut rng = rng::seeded(cfg.seed);
    let mut state = TrainState {
        step: 0,
        keys: AdamState::new(cache.keys.as_slice().len()),
        value_logits: AdamState::new(cache.value_logits.as_slice().len()),
        prompt: AdamState::new(prior.learnable().len()),
        history: Vec::with_capacity(cfg.steps),
    };
    let cache_on = cfg.loss_weights.cache > 0.0 && (cfg.keys_active() || cfg.values_active());
    let prior_on = cfg.loss_weights.text > 0.0 && cfg.prompt_active();
    // a full batch without replacement is the same every step
    let batch_of = |pick: Vec<usize>| {
        let r: Vec<usize> = pick.iter().map(|&i| rows[i]).collect();
        let l: Vec<usize> = pick.iter().map(|&i| labels[i]).collect();
        let exclude: Vec<Option<usize>> = if cfg.exclude_self {
            pick.iter().map(|&i| Some(i)).collect()
        } else {
            vec![]
        };
        (store.rows.select_rows(&r), l, exclude)
    };
    let fixed = (batch == rows.len()).then(|| batch_of((0..rows.len()).collect()));

    for step in 0..cfg.steps {
        let owned;
        let (queries, batch_labels, exclude) = match &fixed {
            Some(b) => b,
            None => {
                owned = batch_of(draw_batch(&mut rng, rows.len(), batch));
                &owned
            }
        };

        let mut cache_loss = 0.0;
        if cache_on {
            let g = cache.loss_and_grads_excluding(queries, batch_labels, exclude)?;
            cache_loss = g.loss;
            let w = cfg.loss_weights.cache;
            if cfg.keys_active() {
                let grad: Vec<f64> = g.keys.as_slice().iter().map(|v| v * w).collect();
                adam_step(
                    cache.keys.as_mut_slice(),
                    &grad,
                    &mut state.keys,
                    cfg.lr_keys,
                    &adam,
                )?;
                cache.project()?;
            }
            if cfg.values_active() {
                let grad: Vec<f64> = g.value_logits.as_slice().iter().map(|v| v * w).collect();
                adam_step(
                    cache.value_logits.as_mut_slice(),
                    &grad,
                    &mut state.value_logits,
                    cfg.lr_value_logits,
                    &adam,
                )?;
            }
        }

        let mut text_loss = 0.0;
        if prior_on {
            let g = prior.loss_and_grads(queries, batch_labels)?;
            text_loss = g.loss;
            let w = cfg.loss_weights.text;
            let grad: Vec<f64> = g.prompt.iter().map(|v| v * w).collect();
            adam_step(
                prior.learnable_mut(),
                &grad,
                &mut state.prompt,
                cfg.lr_prompt,
                &adam,
            )?;
            prior.renormalize()?;
        }

        state.step = step + 1;
        state.history.push(LossRecord {
            step: state.step,
            cache_loss,
            text_loss,
            total: cfg.loss_weights.cache * cache_loss + cfg.loss_weights.text * text_loss,
        });
    }
    Ok((cache, prior, state))
}
