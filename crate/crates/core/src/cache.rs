//! Learnable key/value cache.
//!
//! Keys are instance features, values are label distributions: one-hot for
//! annotated instances, `softmax(logits)` for the unlabeled core set. A
//! query is answered by attention, `softmax(β · q Kᵀ) · V`, and the same
//! expression is used for the training loss.

use crate::dataset::EmbeddingStore;
use crate::error::{Error, Result};
use crate::numerics::{dot, nll_grad, normalize_in_place, softmax_in_place, Matrix, PROB_FLOOR};
use crate::sampler::FewShotSplit;

pub const DEFAULT_BETA: f64 = 10.0;

/// Logit given to the true class when a labeled row is made learnable.
pub const UNFROZEN_LABEL_LOGIT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheModel {
    pub keys: Matrix,
    /// Labeled rows store their one-hot distribution verbatim while frozen;
    /// every other row is a logit vector mapped through softmax at use.
    pub value_logits: Matrix,
    /// Rows that never receive a gradient.
    pub frozen_mask: Vec<bool>,
    /// Rows built from an annotated instance.
    pub labeled_mask: Vec<bool>,
    /// Multiplier on `q·k` before the softmax.
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachePrediction {
    pub probs: Matrix,
    pub attention: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheGrads {
    pub loss: f64,
    pub keys: Matrix,
    pub value_logits: Matrix,
}

/// Cache over `split.labeled` followed by `split.unlabeled_core`.
pub fn build_cache(
    split: &FewShotSplit,
    store: &EmbeddingStore,
    num_classes: usize,
    beta: f64,
) -> Result<CacheModel> {
    let n_lab = split.labeled.len();
    let n = n_lab + split.unlabeled_core.len();
    if n == 0 {
        return Err(Error::InvalidInput(
            "cannot build a cache from an empty split".into(),
        ));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidInput(format!(
            "logit scale must be positive, got {beta}"
        )));
    }
    let rows: Vec<usize> = split
        .labeled
        .iter()
        .map(|&(r, _)| r)
        .chain(split.unlabeled_core.iter().copied())
        .collect();
    if let Some(&bad) = rows.iter().find(|&&r| r >= store.n()) {
        return Err(Error::InvalidInput(format!(
            "split row {bad} outside store of {} rows",
            store.n()
        )));
    }
    let keys = store.rows.select_rows(&rows);
    let mut value_logits = Matrix::zeros(n, num_classes);
    for (i, &(_, c)) in split.labeled.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::InvalidInput(format!(
                "label {c} >= {num_classes} classes"
            )));
        }
        value_logits.set(i, c, 1.0);
    }
    let labeled_mask: Vec<bool> = (0..n).map(|i| i < n_lab).collect();
    Ok(CacheModel {
        keys,
        value_logits,
        frozen_mask: labeled_mask.clone(),
        labeled_mask,
        beta,
    })
}

impl CacheModel {
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.value_logits.cols()
    }

    fn is_verbatim(&self, row: usize) -> bool {
        self.labeled_mask[row] && self.frozen_mask[row]
    }

    /// Makes labeled rows learnable, re-encoding each one-hot row as logits.
    pub fn unfreeze_labels(&mut self) {
        for i in 0..self.len() {
            if self.is_verbatim(i) {
                for v in self.value_logits.row_mut(i) {
                    *v = if *v == 1.0 { UNFROZEN_LABEL_LOGIT } else { 0.0 };
                }
                self.frozen_mask[i] = false;
            }
        }
    }

    /// Stops all value rows from learning (the pseudo-labels stay uniform).
    pub fn freeze_values(&mut self) {
        self.frozen_mask.iter_mut().for_each(|f| *f = true);
    }

    /// Row-stochastic value matrix actually used for retrieval.
    pub fn value_distributions(&self) -> Matrix {
        let mut v = self.value_logits.clone();
        for i in 0..v.rows() {
            if !self.is_verbatim(i) {
                softmax_in_place(v.row_mut(i));
            }
        }
        v
    }

    fn check_queries(&self, queries: &Matrix) -> Result<()> {
        if queries.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("query dimension {}", self.dim()),
                actual: format!("{}", queries.cols()),
            });
        }
        Ok(())
    }

    pub fn retrieve(&self, queries: &Matrix) -> Result<CachePrediction> {
        self.retrieve_excluding(queries, &[])
    }

    /// Like [`retrieve`](Self::retrieve), but query `i` ignores cache row
    /// `exclude[i]` when present. Used to score labeled instances without
    /// letting them look themselves up.
    pub fn retrieve_excluding(
        &self,
        queries: &Matrix,
        exclude: &[Option<usize>],
    ) -> Result<CachePrediction> {
        self.check_queries(queries)?;
        let values = self.value_distributions();
        let mut attention = queries.matmul_transposed(&self.keys)?;
        let mut probs = Matrix::zeros(queries.rows(), self.num_classes());
        for i in 0..queries.rows() {
            let row = attention.row_mut(i);
            for s in row.iter_mut() {
                *s *= self.beta;
            }
            if let Some(Some(skip)) = exclude.get(i) {
                if self.len() > 1 {
                    row[*skip] = f64::NEG_INFINITY;
                }
            }
            softmax_in_place(row);
            let out = probs.row_mut(i);
            for (j, &a) in attention.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &v) in out.iter_mut().zip(values.row(j)) {
                    *o += a * v;
                }
            }
        }
        Ok(CachePrediction { probs, attention })
    }

    /// Mean cross-entropy of retrieval on labeled queries, with gradients
    /// for the keys and the learnable value rows. Frozen rows get zero.
    pub fn loss_and_grads(&self, queries: &Matrix, labels: &[usize]) -> Result<CacheGrads> {
        self.loss_and_grads_excluding(queries, labels, &[])
    }

    /// Like [`loss_and_grads`](Self::loss_and_grads), but query `i` does not
    /// attend to cache row `exclude[i]` when present.
    pub fn loss_and_grads_excluding(
        &self,
        queries: &Matrix,
        labels: &[usize],
        exclude: &[Option<usize>],
    ) -> Result<CacheGrads> {
        self.check_queries(queries)?;
        if labels.len() != queries.rows() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels", queries.rows()),
                actual: format!("{}", labels.len()),
            });
        }
        if let Some(&c) = labels.iter().find(|&&c| c >= self.num_classes()) {
            return Err(Error::InvalidInput(format!(
                "label {c} >= {} classes",
                self.num_classes()
            )));
        }
        let m = queries.rows();
        let n = self.len();
        let values = self.value_distributions();
        let mut g_keys = Matrix::zeros(n, self.dim());
        let mut g_values = Matrix::zeros(n, self.num_classes());
        if m == 0 {
            return Ok(CacheGrads {
                loss: 0.0,
                keys: g_keys,
                value_logits: g_values,
            });
        }
        let inv_m = 1.0 / m as f64;
        let mut loss = 0.0;
        let mut a = vec![0.0; n];
        let mut da = vec![0.0; n];

        for (i, &y) in labels.iter().enumerate() {
            let q = queries.row(i);
            for (j, s) in a.iter_mut().enumerate() {
                *s = self.beta * dot(q, self.keys.row(j));
            }
            if let Some(Some(skip)) = exclude.get(i) {
                if n > 1 {
                    a[*skip] = f64::NEG_INFINITY;
                }
            }
            softmax_in_place(&mut a);
            let p_y: f64 = a
                .iter()
                .enumerate()
                .map(|(j, &w)| w * values.get(j, y))
                .sum();
            loss -= p_y.clamp(PROB_FLOOR, 1.0).ln();
            let g = nll_grad(p_y) * inv_m;
            if g == 0.0 {
                continue;
            }
            let mut mean_da = 0.0;
            for j in 0..n {
                da[j] = g * values.get(j, y);
                mean_da += a[j] * da[j];
                let gv = g_values.get(j, y);
                g_values.set(j, y, gv + a[j] * g);
            }
            for j in 0..n {
                let ds = a[j] * (da[j] - mean_da);
                if ds == 0.0 {
                    continue;
                }
                let scale = self.beta * ds;
                for (gk, &qv) in g_keys.row_mut(j).iter_mut().zip(q) {
                    *gk += scale * qv;
                }
            }
        }

        // Chain through the softmax of each learnable value row.
        for j in 0..n {
            let row = g_values.row_mut(j);
            if self.frozen_mask[j] {
                row.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let v = values.row(j);
            let inner = dot(v, row);
            for (g, &vj) in row.iter_mut().zip(v) {
                *g = vj * (*g - inner);
            }
        }

        Ok(CacheGrads {
            loss: loss * inv_m,
            keys: g_keys,
            value_logits: g_values,
        })
    }

    /// Re-normalizes every key to unit length.
    pub fn project(&mut self) -> Result<()> {
        for i in 0..self.keys.rows() {
            normalize_in_place(self.keys.row_mut(i))
                .map_err(|_| Error::DegenerateRow { row: i })?;
        }
        Ok(())
    }
}

pub fn cache_loss_and_grads(
    model: &CacheModel,
    queries: &Matrix,
    labels: &[usize],
) -> Result<CacheGrads> {
    model.loss_and_grads(queries, labels)
}

pub fn retrieve(model: &CacheModel, queries: &Matrix) -> Result<CachePrediction> {
    model.retrieve(queries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn split(labeled: Vec<(usize, usize)>, unlabeled: Vec<usize>) -> FewShotSplit {
        FewShotSplit {
            selected_bags: vec![],
            labeled,
            unlabeled_core: unlabeled,
            seed: 0,
            shortfall: vec![],
            absent_classes: vec![],
        }
    }

    fn store(rows: &[[f64; 2]]) -> EmbeddingStore {
        EmbeddingStore::new(Matrix::from_rows(rows).unwrap())
    }

    #[test]
    fn build_layout() {
        let st = store(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [0.8, 0.6]]);
        let c = build_cache(&split(vec![(0, 0), (1, 1)], vec![2]), &st, 2, DEFAULT_BETA).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.frozen_mask, vec![true, true, false]);
        let v = c.value_distributions();
        assert_eq!(v.row(0), &[1.0, 0.0]);
        assert_eq!(v.row(1), &[0.0, 1.0]);
        assert_eq!(v.row(2), &[0.5, 0.5]);
        assert_eq!(c.keys.row(2), st.rows.row(2));
        assert_eq!(c.keys.row(0), st.rows.row(0));

        assert!(build_cache(&split(vec![], vec![]), &st, 2, 1.0).is_err());
    }

    #[test]
    fn retrieve_examples() {
        let st = store(&[[1.0, 0.0], [0.0, 1.0]]);
        let c = build_cache(&split(vec![(0, 0), (1, 1)], vec![]), &st, 2, 1.0).unwrap();
        let q = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let p = c.retrieve(&q).unwrap();
        assert!((p.attention.get(0, 0) - 0.73106).abs() < 1e-5);
        assert!((p.probs.get(0, 0) - 0.73106).abs() < 1e-5);
        assert!((p.probs.get(0, 1) - 0.26894).abs() < 1e-5);

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let q = Matrix::from_rows(&[[s, s]]).unwrap();
        let p = c.retrieve(&q).unwrap();
        assert!((p.probs.get(0, 0) - 0.5).abs() < 1e-15);

        let bad = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(c.retrieve(&bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn identical_values_give_constant_prediction() {
        let st = store(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        let c = build_cache(&split(vec![(0, 0), (1, 0), (2, 0)], vec![]), &st, 2, 10.0).unwrap();
        let q = Matrix::from_rows(&[[0.0, 1.0], [0.8, -0.6]]).unwrap();
        let p = c.retrieve(&q).unwrap();
        for r in p.probs.iter_rows() {
            assert!((r[0] - 1.0).abs() < 1e-15 && r[1] == 0.0);
        }
    }

    #[test]
    fn self_retrieval_loss_vanishes_with_large_beta() {
        let st = store(&[[1.0, 0.0], [0.0, 1.0]]);
        let c = build_cache(&split(vec![(0, 0), (1, 1)], vec![]), &st, 2, 200.0).unwrap();
        let q = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let g = c.loss_and_grads(&q, &[0]).unwrap();
        assert!(g.loss < 1e-12);
    }

    fn random_cache(rng: &mut impl Rng) -> (CacheModel, Matrix, Vec<usize>) {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=6);
        let k = rng.random_range(2..=3);
        let mut keys = Matrix::zeros(n, d);
        keys.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        let mut logits = Matrix::zeros(n, k);
        logits
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-2.0..2.0));
        let labeled: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        for (i, &l) in labeled.iter().enumerate() {
            if l {
                let c = rng.random_range(0..k);
                for j in 0..k {
                    logits.set(i, j, if j == c { 1.0 } else { 0.0 });
                }
            }
        }
        let m = rng.random_range(1..=4);
        let mut q = Matrix::zeros(m, d);
        q.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        crate::numerics::normalize_rows_in_place(&mut q).unwrap();
        let labels = (0..m).map(|_| rng.random_range(0..k)).collect();
        let model = CacheModel {
            keys,
            value_logits: logits,
            frozen_mask: labeled.clone(),
            labeled_mask: labeled,
            beta: rng.random_range(0.5..4.0),
        };
        (model, q, labels)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for trial in 0..100 {
            let mut rng = crate::rng::seeded(1000 + trial);
            let (model, q, labels) = random_cache(&mut rng);
            let nk = model.keys.as_slice().len();
            let free: Vec<usize> = (0..model.len())
                .filter(|&i| !model.frozen_mask[i])
                .collect();
            let k = model.num_classes();
            let mut params = model.keys.as_slice().to_vec();
            for &i in &free {
                params.extend_from_slice(model.value_logits.row(i));
            }
            let f = |p: &[f64]| {
                let mut m = model.clone();
                m.keys.as_mut_slice().copy_from_slice(&p[..nk]);
                for (slot, &i) in free.iter().enumerate() {
                    m.value_logits
                        .row_mut(i)
                        .copy_from_slice(&p[nk + slot * k..nk + (slot + 1) * k]);
                }
                let g = m.loss_and_grads(&q, &labels).unwrap();
                let mut grad = g.keys.as_slice().to_vec();
                for &i in &free {
                    grad.extend_from_slice(g.value_logits.row(i));
                }
                (g.loss, grad)
            };
            let r = finite_difference_check(f, &params, 1e-5, 1e-4);
            assert!(r.passed, "trial {trial}: {r:?}");
        }
    }

    #[test]
    fn frozen_rows_get_exactly_zero_gradient() {
        let mut rng = crate::rng::seeded(3);
        for _ in 0..20 {
            let (model, q, labels) = random_cache(&mut rng);
            let g = model.loss_and_grads(&q, &labels).unwrap();
            for i in 0..model.len() {
                if model.frozen_mask[i] {
                    assert!(g.value_logits.row(i).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn project_examples() {
        let mut c = CacheModel {
            keys: Matrix::from_rows(&[[2.0, 0.0], [0.6, 0.8]]).unwrap(),
            value_logits: Matrix::zeros(2, 2),
            frozen_mask: vec![false; 2],
            labeled_mask: vec![false; 2],
            beta: 1.0,
        };
        c.project().unwrap();
        assert_eq!(c.keys.row(0), &[1.0, 0.0]);
        let before = c.keys.clone();
        c.project().unwrap();
        assert!(c.keys.max_abs_diff(&before) <= 1e-12);
        c.keys.row_mut(1).copy_from_slice(&[0.0, 0.0]);
        assert!(matches!(c.project(), Err(Error::DegenerateRow { row: 1 })));
    }

    #[test]
    fn unfreeze_encodes_labels_as_logits() {
        let st = store(&[[1.0, 0.0], [0.0, 1.0]]);
        let mut c = build_cache(&split(vec![(0, 1)], vec![1]), &st, 2, 1.0).unwrap();
        c.unfreeze_labels();
        assert_eq!(c.frozen_mask, vec![false, false]);
        assert_eq!(c.value_logits.row(0), &[0.0, UNFROZEN_LABEL_LOGIT]);
        assert!(c.value_distributions().get(0, 1) > 0.9999);
    }

    proptest! {
        #[test]
        fn retrieval_rows_on_simplex(seed in 0u64..5000) {
            let mut rng = crate::rng::seeded(seed);
            let (mut model, q, _) = random_cache(&mut rng);
            model.project().unwrap();
            let p = model.retrieve(&q).unwrap();
            for r in p.probs.iter_rows() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(r.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn permuting_rows_preserves_retrieval(seed in 0u64..5000) {
            let mut rng = crate::rng::seeded(seed);
            let (model, q, _) = random_cache(&mut rng);
            let mut perm: Vec<usize> = (0..model.len()).collect();
            perm.reverse();
            perm.rotate_left(rng.random_range(0..model.len()));
            let permuted = CacheModel {
                keys: model.keys.select_rows(&perm),
                value_logits: model.value_logits.select_rows(&perm),
                frozen_mask: perm.iter().map(|&i| model.frozen_mask[i]).collect(),
                labeled_mask: perm.iter().map(|&i| model.labeled_mask[i]).collect(),
                beta: model.beta,
            };
            let a = model.retrieve(&q).unwrap().probs;
            let b = permuted.retrieve(&q).unwrap().probs;
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }

        #[test]
        fn vanishing_beta_averages_values(seed in 0u64..5000) {
            let mut rng = crate::rng::seeded(seed);
            let (mut model, q, _) = random_cache(&mut rng);
            model.beta = 1e-8;
            let v = model.value_distributions();
            let n = model.len() as f64;
            let mean: Vec<f64> = (0..model.num_classes())
                .map(|c| (0..model.len()).map(|j| v.get(j, c)).sum::<f64>() / n)
                .collect();
            let p = model.retrieve(&q).unwrap().probs;
            for r in p.iter_rows() {
                for (a, b) in r.iter().zip(&mean) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}
