//! Dual-tier few-shot simulation: pick `K` bags per class, reduce their
//! instances to a k-means core set, reveal `L` labels per class from the
//! core set and keep the rest as unlabeled cache entries.

mod kmeans;

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, KMeansResult};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng;

pub const DEFAULT_KMEANS_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotSpec {
    pub bag_shot: usize,
    pub instance_shot: usize,
    pub coreset_fraction: f64,
    pub coreset_cap: usize,
    pub seed: u64,
    /// Label `instance_shot` instances inside every selected bag instead of
    /// `instance_shot` per class across the selected bags.
    pub per_bag: bool,
}

impl Default for FewShotSpec {
    fn default() -> Self {
        Self {
            bag_shot: 1,
            instance_shot: 16,
            coreset_fraction: 0.10,
            coreset_cap: 1000,
            seed: 0,
            per_bag: false,
        }
    }
}

impl FewShotSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bag_shot == 0 || self.instance_shot == 0 {
            return Err(Error::InvalidInput(
                "bag_shot and instance_shot must be >= 1".into(),
            ));
        }
        if !(self.coreset_fraction > 0.0 && self.coreset_fraction <= 1.0) {
            return Err(Error::InvalidInput(
                "coreset_fraction must lie in (0, 1]".into(),
            ));
        }
        if self.coreset_cap == 0 {
            return Err(Error::InvalidInput("coreset_cap must be >= 1".into()));
        }
        Ok(())
    }

    /// Core-set size for `n` candidate instances.
    pub fn coreset_size(&self, n: usize) -> usize {
        let by_fraction = ((self.coreset_fraction * n as f64) - 1e-9).ceil() as usize;
        by_fraction.clamp(1, n.max(1)).min(self.coreset_cap)
    }
}

/// Fewer labeled instances than requested were available.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    /// Class name, or bag id in per-bag mode.
    pub scope: String,
    pub requested: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub selected_bags: Vec<String>,
    /// `(store row, class)` pairs whose labels are revealed.
    pub labeled: Vec<(usize, usize)>,
    /// Core-set rows that remain unlabeled.
    pub unlabeled_core: Vec<usize>,
    pub seed: u64,
    pub shortfall: Vec<Shortfall>,
    /// Classes with no member in the core set.
    pub absent_classes: Vec<String>,
}

impl FewShotSplit {
    pub fn num_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn labeled_rows(&self) -> Vec<usize> {
        self.labeled.iter().map(|&(r, _)| r).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labeled.iter().map(|&(_, c)| c).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = crate::error::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }

    /// Disjointness and containment checks against the dataset.
    pub fn check(&self, ds: &Dataset) -> Result<()> {
        let mut allowed = HashSet::new();
        for id in &self.selected_bags {
            let bag = ds
                .bag(id)
                .ok_or_else(|| Error::InvalidInput(format!("split names unknown bag {id}")))?;
            allowed.extend(bag.range());
        }
        let labeled: HashSet<usize> = self.labeled.iter().map(|&(r, _)| r).collect();
        if labeled.len() != self.labeled.len() {
            return Err(Error::InvalidInput("split labels a row twice".into()));
        }
        for &(r, c) in &self.labeled {
            if !allowed.contains(&r) {
                return Err(Error::InvalidInput(format!(
                    "labeled row {r} outside selected bags"
                )));
            }
            if c >= ds.num_classes() {
                return Err(Error::InvalidInput(format!(
                    "labeled row {r} has class {c}"
                )));
            }
        }
        for r in &self.unlabeled_core {
            if labeled.contains(r) {
                return Err(Error::InvalidInput(format!(
                    "row {r} is both labeled and unlabeled"
                )));
            }
            if !allowed.contains(r) {
                return Err(Error::InvalidInput(format!(
                    "core row {r} outside selected bags"
                )));
            }
        }
        Ok(())
    }
}

/// Stratified sampling of `k` bags per class without replacement. Ids are
/// returned grouped by class, in dataset order within a class.
pub fn sample_bags(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<String>> {
    let mut rng = rng::seeded(seed);
    let mut out = Vec::with_capacity(k * ds.num_classes());
    for (class, name) in ds.classes.iter().enumerate() {
        let members: Vec<&str> = ds
            .bags
            .iter()
            .filter(|b| b.label == class)
            .map(|b| b.id.as_str())
            .collect();
        if members.len() < k {
            return Err(Error::InsufficientBags {
                class: name.clone(),
                available: members.len(),
                requested: k,
            });
        }
        let mut picked = index::sample(&mut rng, members.len(), k).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| members[i].to_string()));
    }
    Ok(out)
}

/// Indices (into `points`) of the core-set representatives: the member
/// nearest each k-means centroid.
pub fn select_core_set(points: &Matrix, spec: &FewShotSpec) -> Result<Vec<usize>> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::InvalidInput(
            "core-set selection over zero instances".into(),
        ));
    }
    let k = spec.coreset_size(n);
    let km = kmeans(
        points,
        k,
        DEFAULT_KMEANS_ITERS,
        rng::derive_seed(spec.seed, 2),
    )?;
    let mut best: Vec<Option<(usize, f64)>> = vec![None; k];
    for (i, &c) in km.assignment.iter().enumerate() {
        let d = sq_dist(points.row(i), km.centroids.row(c));
        match best[c] {
            Some((_, bd)) if bd <= d => {}
            _ => best[c] = Some((i, d)),
        }
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut used = HashSet::new();
    for (c, b) in best.iter().enumerate() {
        let pick = match b {
            Some((i, _)) => *i,
            // An empty final cluster: nearest unused point to its centroid.
            None => (0..n)
                .filter(|i| !used.contains(i))
                .min_by(|&a, &b| {
                    sq_dist(points.row(a), km.centroids.row(c))
                        .total_cmp(&sq_dist(points.row(b), km.centroids.row(c)))
                })
                .expect("k <= n"),
        };
        used.insert(pick);
        chosen.push(pick);
    }
    Ok(chosen)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub labeled: Vec<(usize, usize)>,
    /// `(class, available)` for every class with fewer than `l` members.
    pub shortfall: Vec<(usize, usize)>,
    pub absent_classes: Vec<usize>,
}

/// Uniform per-class sample of `l` core-set rows. `row_labels[r]` is the
/// ground truth of store row `r`.
pub fn sample_labeled_instances(
    core_set: &[usize],
    row_labels: &[Option<usize>],
    l: usize,
    num_classes: usize,
    seed: u64,
) -> Result<LabeledSample> {
    let mut rng = rng::seeded(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for &r in core_set {
        let c = row_labels.get(r).copied().flatten().ok_or_else(|| {
            Error::InvalidInput(format!("core-set row {r} has no ground-truth label"))
        })?;
        if c >= num_classes {
            return Err(Error::InvalidInput(format!(
                "row {r} has class {c} >= {num_classes}"
            )));
        }
        by_class[c].push(r);
    }
    let mut out = LabeledSample {
        labeled: Vec::new(),
        shortfall: Vec::new(),
        absent_classes: Vec::new(),
    };
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            out.absent_classes.push(c);
        }
        if members.len() < l {
            out.shortfall.push((c, members.len()));
        }
        let take = l.min(members.len());
        let mut picked = index::sample(&mut rng, members.len(), take).into_vec();
        picked.sort_unstable();
        out.labeled
            .extend(picked.into_iter().map(|i| (members[i], c)));
    }
    Ok(out)
}

/// Runs the full simulation: bags, core set, labels.
pub fn few_shot_split(ds: &Dataset, spec: &FewShotSpec) -> Result<FewShotSplit> {
    spec.validate()?;
    let row_labels = ds
        .row_labels()
        .ok_or_else(|| Error::InvalidInput("few-shot simulation needs instance labels".into()))?;
    let selected = sample_bags(ds, spec.bag_shot, rng::derive_seed(spec.seed, 1))?;
    let rows: Vec<usize> = selected
        .iter()
        .flat_map(|id| ds.bag(id).expect("sampled from dataset").range())
        .collect();
    let points = ds.store.rows.select_rows(&rows);
    let core: Vec<usize> = select_core_set(&points, spec)?
        .into_iter()
        .map(|i| rows[i])
        .collect();

    let label_seed = rng::derive_seed(spec.seed, 3);
    let (labeled, shortfall, absent) = if spec.per_bag {
        per_bag_labels(
            ds,
            &selected,
            &core,
            &row_labels,
            spec.instance_shot,
            label_seed,
        )?
    } else {
        let s = sample_labeled_instances(
            &core,
            &row_labels,
            spec.instance_shot,
            ds.num_classes(),
            label_seed,
        )?;
        let shortfall = s
            .shortfall
            .into_iter()
            .map(|(c, available)| Shortfall {
                scope: ds.classes[c].clone(),
                requested: spec.instance_shot,
                available,
            })
            .collect();
        (s.labeled, shortfall, s.absent_classes)
    };

    let labeled_set: HashSet<usize> = labeled.iter().map(|&(r, _)| r).collect();
    let unlabeled_core = core
        .iter()
        .copied()
        .filter(|r| !labeled_set.contains(r))
        .collect();
    let split = FewShotSplit {
        selected_bags: selected,
        labeled,
        unlabeled_core,
        seed: spec.seed,
        shortfall,
        absent_classes: absent.into_iter().map(|c| ds.classes[c].clone()).collect(),
    };
    split.check(ds)?;
    Ok(split)
}

type PerBag = (Vec<(usize, usize)>, Vec<Shortfall>, Vec<usize>);

fn per_bag_labels(
    ds: &Dataset,
    selected: &[String],
    core: &[usize],
    row_labels: &[Option<usize>],
    l: usize,
    seed: u64,
) -> Result<PerBag> {
    let mut rng = rng::seeded(seed);
    let mut labeled = Vec::new();
    let mut shortfall = Vec::new();
    let mut seen = vec![false; ds.num_classes()];
    for id in selected {
        let range = ds.bag(id).expect("selected from dataset").range();
        let members: Vec<usize> = core.iter().copied().filter(|r| range.contains(r)).collect();
        if members.len() < l {
            shortfall.push(Shortfall {
                scope: id.clone(),
                requested: l,
                available: members.len(),
            });
        }
        let mut picked = index::sample(&mut rng, members.len(), l.min(members.len())).into_vec();
        picked.sort_unstable();
        for i in picked {
            let r = members[i];
            let c = row_labels[r]
                .ok_or_else(|| Error::InvalidInput(format!("row {r} has no label")))?;
            labeled.push((r, c));
        }
    }
    for &r in core {
        if let Some(c) = row_labels[r] {
            seen[c] = true;
        }
    }
    let absent = (0..ds.num_classes()).filter(|&c| !seen[c]).collect();
    Ok((labeled, shortfall, absent))
}
