use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Bag, Dataset, EmbeddingStore};
use crate::error::{Error, Result};
use crate::numerics::{normalize_in_place, Matrix};

/// Desk-scale stand-in for an encoded slide collection.
///
/// Class `c` has the `c`-th standard basis vector as prototype. A class-`c`
/// bag holds `ceil(positive_fraction * instances_per_bag)` class-`c`
/// instances; the rest are class 0 (background). Class-0 bags are all
/// background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub bags_per_class: usize,
    pub instances_per_bag: usize,
    pub positive_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            dim: 32,
            bags_per_class: 16,
            instances_per_bag: 200,
            positive_fraction: 0.2,
            noise_sigma: 0.15,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("synth spec: {m}")));
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.dim < self.num_classes {
            return bad("dim must be >= num_classes");
        }
        if self.bags_per_class == 0 || self.instances_per_bag == 0 {
            return bad("bags_per_class and instances_per_bag must be positive");
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return bad("positive_fraction must lie in (0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }

    pub fn positives_per_bag(&self) -> usize {
        ((self.positive_fraction * self.instances_per_bag as f64) - 1e-9).ceil() as usize
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_total = spec.num_classes * spec.bags_per_class * spec.instances_per_bag;
    let mut data = Vec::with_capacity(n_total * spec.dim);
    let mut bags = Vec::with_capacity(spec.num_classes * spec.bags_per_class);
    let n_pos = spec.positives_per_bag().min(spec.instances_per_bag);

    let mut row = vec![0.0; spec.dim];
    let mut start = 0;
    for class in 0..spec.num_classes {
        for b in 0..spec.bags_per_class {
            let mut labels: Vec<usize> = (0..spec.instances_per_bag)
                .map(|i| if i < n_pos { class } else { 0 })
                .collect();
            labels.shuffle(&mut rng);
            for &label in &labels {
                for (j, v) in row.iter_mut().enumerate() {
                    let proto = if j == label { 1.0 } else { 0.0 };
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = proto + spec.noise_sigma * z;
                }
                normalize_in_place(&mut row)?;
                data.extend_from_slice(&row);
            }
            bags.push(Bag {
                id: format!("c{class}_b{b:03}"),
                label: class,
                start,
                end: start + spec.instances_per_bag,
                instance_labels: Some(labels),
            });
            start += spec.instances_per_bag;
        }
    }

    let ds = Dataset {
        name: format!("synth-seed{}", spec.seed),
        dim: spec.dim,
        classes: (0..spec.num_classes).map(|c| format!("class{c}")).collect(),
        bags,
        store: EmbeddingStore::new(Matrix::new(n_total, spec.dim, data)?),
    };
    ds.validate()?;
    Ok(ds)
}
