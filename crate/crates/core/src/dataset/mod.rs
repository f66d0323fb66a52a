//! Bags of instance embeddings, their on-disk form, and a synthetic generator.

pub mod femb;
mod manifest;
mod synth;

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use manifest::{load_manifest, save_dataset, BagEntry, Manifest};
pub use synth::{synth_generate, SynthSpec};

use crate::error::{Error, Result};
use crate::numerics::{norm, Matrix};

/// Instance feature vectors, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub rows: Matrix,
}

impl EmbeddingStore {
    pub fn new(rows: Matrix) -> Self {
        Self { rows }
    }

    pub fn n(&self) -> usize {
        self.rows.rows()
    }

    pub fn d(&self) -> usize {
        self.rows.cols()
    }
}

/// Reads a FEMB file into an embedding store, widening to `f64`.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingStore> {
    femb::read_matrix(path).map(EmbeddingStore::new)
}

/// Writes the store as FEMB version 1 (binary32).
pub fn write_embeddings(path: &Path, store: &EmbeddingStore) -> Result<()> {
    femb::write_matrix(path, &store.rows, femb::Precision::F32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub id: String,
    pub label: usize,
    pub start: usize,
    pub end: usize,
    pub instance_labels: Option<Vec<usize>>,
}

impl Bag {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub classes: Vec<String>,
    pub bags: Vec<Bag>,
    pub store: EmbeddingStore,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_instances(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }

    pub fn bag(&self, id: &str) -> Option<&Bag> {
        self.bags.iter().find(|b| b.id == id)
    }

    pub fn has_instance_labels(&self) -> bool {
        self.bags.iter().all(|b| b.instance_labels.is_some())
    }

    /// Ground-truth label for every store row covered by a bag, or `None`
    /// if any bag lacks instance labels.
    pub fn row_labels(&self) -> Option<Vec<Option<usize>>> {
        let mut out = vec![None; self.store.n()];
        for bag in &self.bags {
            let labels = bag.instance_labels.as_ref()?;
            for (row, &l) in bag.range().zip(labels) {
                out[row] = Some(l);
            }
        }
        Some(out)
    }

    /// Flattened (row, label) pairs in bag order.
    pub fn labeled_rows(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        let mut rows = Vec::with_capacity(self.num_instances());
        let mut labels = Vec::with_capacity(self.num_instances());
        for bag in &self.bags {
            let l = bag.instance_labels.as_ref()?;
            rows.extend(bag.range());
            labels.extend_from_slice(l);
        }
        Some((rows, labels))
    }

    /// Checks the structural invariants every exposed dataset must satisfy.
    pub fn validate(&self) -> Result<()> {
        let n_classes = self.classes.len();
        if n_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "dataset {} needs at least 2 classes, has {n_classes}",
                self.name
            )));
        }
        if self.store.d() != self.dim {
            return Err(Error::DimensionMismatch {
                bag: "<store>".into(),
                expected: self.dim,
                actual: self.store.d(),
            });
        }
        let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(self.bags.len());
        for bag in &self.bags {
            if bag.end <= bag.start || bag.end > self.store.n() {
                return Err(Error::InvalidInput(format!(
                    "bag {}: invalid row range {}..{} for {} stored rows",
                    bag.id,
                    bag.start,
                    bag.end,
                    self.store.n()
                )));
            }
            if bag.label >= n_classes {
                return Err(Error::LabelOutOfRange {
                    bag: bag.id.clone(),
                    label: bag.label,
                    num_classes: n_classes,
                });
            }
            if let Some(labels) = &bag.instance_labels {
                if labels.len() != bag.len() {
                    return Err(Error::RowCountMismatch {
                        bag: bag.id.clone(),
                        declared: bag.len(),
                        actual: labels.len(),
                    });
                }
                if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
                    return Err(Error::LabelOutOfRange {
                        bag: bag.id.clone(),
                        label,
                        num_classes: n_classes,
                    });
                }
            }
            spans.push((bag.start, bag.end, &bag.id));
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::OverlappingRanges {
                    bag: w[1].2.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Rows are expected to be unit-norm; returns the worst deviation.
    pub fn max_norm_deviation(&self) -> f64 {
        self.store
            .rows
            .iter_rows()
            .map(|r| (norm(r) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}
