//! Branch fusion, fusion-weight search, bag pooling and ROC-AUC.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Number of equal intervals on `[0, 1]` searched for the fusion weight.
pub const ALPHA_STEPS: usize = 100;

pub fn alpha_grid() -> Vec<f64> {
    (0..=ALPHA_STEPS)
        .map(|i| i as f64 / ALPHA_STEPS as f64)
        .collect()
}

/// `α · cache + (1 − α) · prior`, row by row.
pub fn fuse(cache_probs: &Matrix, prior_probs: &Matrix, alpha: f64) -> Result<Matrix> {
    if cache_probs.shape() != prior_probs.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", cache_probs.shape()),
            actual: format!("{:?}", prior_probs.shape()),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "fusion weight {alpha} outside [0, 1]"
        )));
    }
    let data = cache_probs
        .as_slice()
        .iter()
        .zip(prior_probs.as_slice())
        .map(|(&c, &p)| alpha * c + (1.0 - alpha) * p)
        .collect();
    Matrix::new(cache_probs.rows(), cache_probs.cols(), data)
}

/// Rank-based (Mann–Whitney) AUC with midranks for ties. `None` when
/// either class is empty.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| positive[k]).count();
        rank_sum += mid * pos_in_group as f64;
        i = j;
    }
    let np = n_pos as f64;
    let u = rank_sum - np * (np + 1.0) / 2.0;
    Some(u / (np * n_neg as f64))
}

/// One-vs-rest AUC per class plus the macro mean over defined classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAuc {
    pub per_class: Vec<Option<f64>>,
    pub macro_mean: Option<f64>,
    /// Classes whose AUC is undefined (no positives or no negatives).
    pub undefined: Vec<usize>,
}

impl ClassAuc {
    fn from_scores(scores: &Matrix, labels: &[usize]) -> Result<Self> {
        if scores.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels", scores.rows()),
                actual: format!("{}", labels.len()),
            });
        }
        let per_class: Vec<Option<f64>> = (0..scores.cols())
            .map(|c| {
                let s: Vec<f64> = (0..scores.rows()).map(|i| scores.get(i, c)).collect();
                let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                auc(&s, &pos)
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let macro_mean =
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let undefined = per_class
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_none())
            .map(|(c, _)| c)
            .collect();
        Ok(Self {
            per_class,
            macro_mean,
            undefined,
        })
    }
}

pub fn instance_auc(probs: &Matrix, labels: &[usize]) -> Result<ClassAuc> {
    ClassAuc::from_scores(probs, labels)
}

pub fn bag_auc(bag_scores: &Matrix, bag_labels: &[usize]) -> Result<ClassAuc> {
    ClassAuc::from_scores(bag_scores, bag_labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Max,
    #[default]
    Mean,
    /// Mean of the top `max(1, ceil(1%))` instance scores.
    TopkMean,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
            Pooling::TopkMean => "topk_mean",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            "topk_mean" => Ok(Pooling::TopkMean),
            other => Err(Error::Unknown {
                what: "pooling operator",
                name: other.to_string(),
            }),
        }
    }
}

fn pool_column(values: &mut [f64], op: Pooling) -> f64 {
    match op {
        Pooling::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Pooling::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Pooling::TopkMean => {
            let k = ((values.len() as f64 * 0.01).ceil() as usize).max(1);
            values.sort_by(|a, b| b.total_cmp(a));
            values[..k].iter().sum::<f64>() / k as f64
        }
    }
}

/// Per-bag, per-class pooled instance probabilities. `bags` are row
/// ranges into `instance_probs`.
pub fn bag_pool(instance_probs: &Matrix, bags: &[Range<usize>], op: Pooling) -> Result<Matrix> {
    let k = instance_probs.cols();
    let mut out = Matrix::zeros(bags.len(), k);
    let mut col = Vec::new();
    for (b, range) in bags.iter().enumerate() {
        if range.is_empty() {
            return Err(Error::InvalidInput(format!("bag {b} is empty")));
        }
        if range.end > instance_probs.rows() {
            return Err(Error::InvalidInput(format!(
                "bag {b} exceeds {} rows",
                instance_probs.rows()
            )));
        }
        for c in 0..k {
            col.clear();
            col.extend(range.clone().map(|i| instance_probs.get(i, c)));
            out.set(b, c, pool_column(&mut col, op));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    pub best_alpha: f64,
    pub best_metric: f64,
    /// `(α, macro instance AUC)` at every grid point.
    pub table: Vec<(f64, f64)>,
}

/// Evaluates macro instance AUC of the fused prediction at every grid point
/// and returns the best; ties go to the larger α.
pub fn sweep_alpha(
    cache_probs: &Matrix,
    prior_probs: &Matrix,
    labels: &[usize],
    grid: &[f64],
) -> Result<AlphaSweep> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty fusion grid".into()));
    }
    let mut table = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let fused = fuse(cache_probs, prior_probs, alpha)?;
        let metric = instance_auc(&fused, labels)?.macro_mean.ok_or_else(|| {
            Error::UndefinedMetric("fusion selection labels contain a single class".into())
        })?;
        table.push((alpha, metric));
    }
    let (best_alpha, best_metric) =
        table
            .iter()
            .copied()
            .fold((f64::NAN, f64::NEG_INFINITY), |best, (a, m)| {
                if m > best.1 || (m == best.1 && a > best.0) {
                    (a, m)
                } else {
                    best
                }
            });
    Ok(AlphaSweep {
        best_alpha,
        best_metric,
        table,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub instance_auc: ClassAuc,
    pub bag_auc: ClassAuc,
    pub pooling: Pooling,
    pub n_instances: usize,
    pub n_bags: usize,
    pub alpha: f64,
    /// Where α came from: `train-labeled`, `fixed`, `forced`, or `fallback`.
    pub alpha_source: String,
    pub seed: u64,
}

/// Scores a dataset from fused probabilities with one row per store row.
/// Without instance labels every instance-level AUC is flagged undefined.
pub fn evaluate(
    ds: &Dataset,
    fused: &Matrix,
    pooling: Pooling,
    alpha: f64,
    alpha_source: &str,
    seed: u64,
) -> Result<EvalReport> {
    if fused.rows() != ds.store.n() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} rows", ds.store.n()),
            actual: format!("{}", fused.rows()),
        });
    }
    let k = fused.cols();
    let inst = match ds.labeled_rows() {
        Some((rows, labels)) => instance_auc(&fused.select_rows(&rows), &labels)?,
        None => ClassAuc {
            per_class: vec![None; k],
            macro_mean: None,
            undefined: (0..k).collect(),
        },
    };
    let ranges: Vec<Range<usize>> = ds.bags.iter().map(|b| b.range()).collect();
    let pooled = bag_pool(fused, &ranges, pooling)?;
    let bag_labels: Vec<usize> = ds.bags.iter().map(|b| b.label).collect();
    let bag = bag_auc(&pooled, &bag_labels)?;
    Ok(EvalReport {
        classes: ds.classes.clone(),
        instance_auc: inst,
        bag_auc: bag,
        pooling,
        n_instances: ds.num_instances(),
        n_bags: ds.bags.len(),
        alpha,
        alpha_source: alpha_source.to_string(),
        seed,
    })
}

#[cfg(test)]
#[allow(clippy::single_range_in_vec_init)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(scores: &[f64], pos: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        let lab = [true, true, false, false];
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.1], &lab), Some(1.0));
        assert_eq!(auc(&[0.9, 0.2, 0.8, 0.4], &lab), Some(0.5));
        assert_eq!(auc(&[0.5; 4], &lab), Some(0.5));
        assert_eq!(auc(&[0.5, 0.1], &[true, true]), None);
    }

    #[test]
    fn single_class_is_flagged() {
        let p = Matrix::from_rows(&[[0.2, 0.8], [0.4, 0.6]]).unwrap();
        let r = instance_auc(&p, &[1, 1]).unwrap();
        assert_eq!(r.per_class, vec![None, None]);
        assert_eq!(r.macro_mean, None);
        assert_eq!(r.undefined, vec![0, 1]);
    }

    #[test]
    fn fuse_endpoints() {
        let c = Matrix::from_rows(&[[1.0, 0.0], [0.3, 0.7]]).unwrap();
        let p = Matrix::from_rows(&[[0.0, 1.0], [0.9, 0.1]]).unwrap();
        assert_eq!(fuse(&c, &p, 1.0).unwrap(), c);
        assert_eq!(fuse(&c, &p, 0.0).unwrap(), p);
        assert_eq!(fuse(&c, &p, 0.5).unwrap().row(0), &[0.5, 0.5]);
        assert!(fuse(&c, &Matrix::zeros(1, 2), 0.5).is_err());
        assert!(fuse(&c, &p, 1.5).is_err());
    }

    #[test]
    fn grid_has_101_points() {
        let g = alpha_grid();
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[100], 1.0);
        assert_eq!(g[37], 0.37);
    }

    #[test]
    fn sweep_prefers_perfect_cache_and_breaks_ties_high() {
        let labels = [0, 0, 1, 1, 1, 0];
        let cache = Matrix::from_rows(&[
            [0.9, 0.1],
            [0.8, 0.2],
            [0.1, 0.9],
            [0.3, 0.7],
            [0.2, 0.8],
            [0.6, 0.4],
        ])
        .unwrap();
        let prior = Matrix::from_rows(&[
            [0.1, 0.9],
            [0.5, 0.5],
            [0.7, 0.3],
            [0.5, 0.5],
            [0.4, 0.6],
            [0.2, 0.8],
        ])
        .unwrap();
        let s = sweep_alpha(&cache, &prior, &labels, &alpha_grid()).unwrap();
        assert_eq!(s.best_alpha, 1.0);
        assert_eq!(s.best_metric, 1.0);
        assert_eq!(s.table.len(), 101);

        let s = sweep_alpha(&cache, &cache, &labels, &alpha_grid()).unwrap();
        assert_eq!(s.best_alpha, 1.0);
        assert!(s.table.iter().all(|&(_, m)| m == s.table[0].1));

        assert!(matches!(
            sweep_alpha(&cache, &prior, &[1; 6], &alpha_grid()),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn pooling_examples() {
        let p = Matrix::from_rows(&[[0.1], [0.9], [0.2]]).unwrap();
        let r = [0..3];
        assert_eq!(bag_pool(&p, &r, Pooling::Max).unwrap().get(0, 0), 0.9);
        assert!((bag_pool(&p, &r, Pooling::Mean).unwrap().get(0, 0) - 0.4).abs() < 1e-15);
        assert_eq!(bag_pool(&p, &r, Pooling::TopkMean).unwrap().get(0, 0), 0.9);
        for op in [Pooling::Max, Pooling::Mean, Pooling::TopkMean] {
            assert_eq!(bag_pool(&p, &[1..2], op).unwrap().get(0, 0), 0.9);
        }
        assert!(bag_pool(&p, &[1..1], Pooling::Mean).is_err());
    }

    #[test]
    fn topk_uses_one_percent() {
        let vals: Vec<f64> = (0..250).map(|i| i as f64).collect();
        let p = Matrix::new(250, 1, vals).unwrap();
        // ceil(2.5) = 3 → mean of 249, 248, 247
        assert_eq!(
            bag_pool(&p, &[0..250], Pooling::TopkMean)
                .unwrap()
                .get(0, 0),
            248.0
        );
    }

    #[test]
    fn bag_auc_matches_pairwise_on_random_bags() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(17);
        let scores: Vec<f64> = (0..200)
            .map(|_| (rng.random_range(0..50) as f64) / 50.0)
            .collect();
        let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..2)).collect();
        let m = Matrix::new(200, 1, scores.clone()).unwrap();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 0).collect();
        let r = bag_auc(&m, &labels).unwrap();
        assert_eq!(r.per_class[0], Some(pairwise(&scores, &pos)));
    }

    proptest! {
        #[test]
        fn auc_equals_pairwise_with_ties(
            raw in proptest::collection::vec((0u8..20, any::<bool>()), 2..300)
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64 * 0.05).collect();
            let pos: Vec<bool> = raw.iter().map(|&(_, p)| p).collect();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            let a = auc(&scores, &pos).unwrap();
            prop_assert!((a - pairwise(&scores, &pos)).abs() <= 1e-12);
            let cubed: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
            prop_assert_eq!(auc(&cubed, &pos).unwrap(), a);
        }

        #[test]
        fn fuse_preserves_simplex(a in 0.0f64..=1.0, x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
            let c = Matrix::from_rows(&[[x, 1.0 - x]]).unwrap();
            let p = Matrix::from_rows(&[[y, 1.0 - y]]).unwrap();
            let f = fuse(&c, &p, a).unwrap();
            prop_assert!((f.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn sweep_invariant_to_row_order(seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = crate::rng::seeded(seed);
            let n = 24;
            let mut rows_c = Vec::new();
            let mut rows_p = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                let c: f64 = rng.random_range(0.0..1.0);
                let p: f64 = rng.random_range(0.0..1.0);
                rows_c.push([c, 1.0 - c]);
                rows_p.push([p, 1.0 - p]);
                labels.push(i % 2);
            }
            let cm = Matrix::from_rows(&rows_c).unwrap();
            let pm = Matrix::from_rows(&rows_p).unwrap();
            let a = sweep_alpha(&cm, &pm, &labels, &alpha_grid()).unwrap();
            let perm: Vec<usize> = (0..n).rev().collect();
            let b = sweep_alpha(&cm.select_rows(&perm), &pm.select_rows(&perm),
                &perm.iter().map(|&i| labels[i]).collect::<Vec<_>>(), &alpha_grid()).unwrap();
            prop_assert_eq!(a.best_alpha, b.best_alpha);
        }
    }
}
