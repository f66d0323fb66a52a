//! Finite-difference audits of every analytic gradient, over randomly
//! drawn small models.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::CacheModel;
use crate::error::{Error, Result};
use crate::numerics::{finite_difference_check, normalize_rows_in_place, Matrix};
use crate::prior::{PriorModel, PriorParams};
use crate::rng;

pub const DEFAULT_TRIALS: usize = 100;
pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// Cache loss w.r.t. keys and unfrozen value logits.
    Cache,
    /// Text loss w.r.t. prototype rows.
    Prototype,
    /// Text loss w.r.t. learnable prompt tokens.
    ToyEncoder,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Cache, Suite::Prototype, Suite::ToyEncoder];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Cache => "cache",
            Suite::Prototype => "prototype",
            Suite::ToyEncoder => "toy-encoder",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::Unknown {
                what: "gradient suite",
                name: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub trials: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub worst_trial: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::new(rows, cols, data).expect("shape")
}

fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    loop {
        let mut m = uniform(rng, rows, cols, -1.0, 1.0);
        if normalize_rows_in_place(&mut m).is_ok() {
            return m;
        }
    }
}

fn labels(rng: &mut impl Rng, m: usize, k: usize) -> Vec<usize> {
    (0..m).map(|_| rng.random_range(0..k)).collect()
}

/// Sharper logit scales push some gradient components below the
/// rounding noise of a central difference with `STEP`; those are covered
/// by an absolute-error test instead.
const MAX_CHECKED_BETA: f64 = 3.0;

struct CacheCase {
    model: CacheModel,
    queries: Matrix,
    labels: Vec<usize>,
    free: Vec<usize>,
}

impl CacheCase {
    fn draw(rng: &mut impl Rng, max_beta: f64) -> Self {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(2..=6);
        let k = rng.random_range(2..=4);
        let mut value_logits = uniform(rng, n, k, -2.0, 2.0);
        // the last row stays learnable so the loss never collapses to zero
        let labeled: Vec<bool> = (0..n).map(|i| i + 1 < n && rng.random_bool(0.4)).collect();
        for (i, _) in labeled.iter().enumerate().filter(|(_, &l)| l) {
            let c = rng.random_range(0..k);
            for j in 0..k {
                value_logits.set(i, j, if j == c { 1.0 } else { 0.0 });
            }
        }
        let model = CacheModel {
            keys: unit_rows(rng, n, d),
            value_logits,
            frozen_mask: labeled.clone(),
            labeled_mask: labeled,
            beta: rng.random_range(0.5..max_beta),
        };
        let m = rng.random_range(1..=5);
        let free = (0..n).filter(|&i| !model.frozen_mask[i]).collect();
        Self {
            queries: unit_rows(rng, m, d),
            labels: labels(rng, m, k),
            model,
            free,
        }
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.model.keys.as_slice().to_vec();
        for &i in &self.free {
            p.extend_from_slice(self.model.value_logits.row(i));
        }
        p
    }

    fn loss_and_grad(&self, p: &[f64]) -> (f64, Vec<f64>) {
        let nk = self.model.keys.as_slice().len();
        let k = self.model.num_classes();
        let mut mm = self.model.clone();
        mm.keys.as_mut_slice().copy_from_slice(&p[..nk]);
        for (slot, &i) in self.free.iter().enumerate() {
            mm.value_logits
                .row_mut(i)
                .copy_from_slice(&p[nk + slot * k..nk + (slot + 1) * k]);
        }
        let g = mm
            .loss_and_grads(&self.queries, &self.labels)
            .expect("valid configuration");
        let mut grad = g.keys.into_vec();
        for &i in &self.free {
            grad.extend_from_slice(g.value_logits.row(i));
        }
        (g.loss, grad)
    }
}

/// Max relative error of one random cache configuration.
fn cache_trial(rng: &mut impl Rng) -> f64 {
    let case = CacheCase::draw(rng, MAX_CHECKED_BETA);
    finite_difference_check(|p| case.loss_and_grad(p), &case.params(), STEP, TOLERANCE)
        .max_rel_error
}

fn prior_error(model: &PriorModel, q: &Matrix, y: &[usize]) -> f64 {
    let f = |p: &[f64]| {
        let mut m = model.clone();
        m.learnable_mut().copy_from_slice(p);
        let g = m.loss_and_grads(q, y).expect("valid configuration");
        (g.loss, g.prompt)
    };
    finite_difference_check(f, model.learnable(), STEP, TOLERANCE).max_rel_error
}

fn prototype_trial(rng: &mut impl Rng) -> f64 {
    let n = rng.random_range(2..=4);
    let d = rng.random_range(2..=6);
    let model = PriorModel {
        params: PriorParams::Prototype {
            features: uniform(rng, n, d, -1.0, 1.0),
        },
        tau: rng.random_range(0.25..1.0),
    };
    let m = rng.random_range(1..=5);
    let q = unit_rows(rng, m, d);
    let y = labels(rng, m, n);
    prior_error(&model, &q, &y)
}

fn toy_trial(rng: &mut impl Rng, seed: u64) -> f64 {
    let n = rng.random_range(2..=3);
    let d = rng.random_range(2..=6);
    let e = rng.random_range(2..=5);
    let base: Vec<Matrix> = (0..n)
        .map(|_| {
            let len = rng.random_range(1..4);
            uniform(rng, len, e, -1.0, 1.0)
        })
        .collect();
    let tokens = rng.random_range(1..=3);
    let mut model =
        PriorModel::toy_encoder(base, d, tokens, seed, 0.5).expect("valid configuration");
    model.tau = rng.random_range(0.2..1.0);
    model
        .learnable_mut()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-1.0..1.0));
    let m = rng.random_range(1..=5);
    let q = unit_rows(rng, m, d);
    let y = labels(rng, m, n);
    prior_error(&model, &q, &y)
}

pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport {
        suite,
        trials,
        failures: 0,
        max_rel_error: 0.0,
        worst_trial: 0,
    };
    for t in 0..trials {
        let trial_seed = rng::derive_seed(seed, t as u64);
        let mut r = rng::seeded(trial_seed);
        let err = match suite {
            Suite::Cache => cache_trial(&mut r),
            Suite::Prototype => prototype_trial(&mut r),
            Suite::ToyEncoder => toy_trial(&mut r, trial_seed),
        };
        if err.is_nan() || err >= TOLERANCE {
            report.failures += 1;
        }
        if err.is_nan() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_trial = t;
        }
    }
    report
}

pub fn run_all(trials: usize, seed: u64) -> Vec<SuiteReport> {
    Suite::ALL
        .into_iter()
        .map(|s| run_suite(s, trials, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_all(DEFAULT_TRIALS, 1) {
            assert!(r.passed(), "{r:?}");
            assert_eq!(r.trials, 100);
        }
    }

    #[test]
    fn sharp_cache_gradients_match_in_absolute_terms() {
        let mut r = rng::seeded(9);
        for _ in 0..100 {
            let case = CacheCase::draw(&mut r, 10.0);
            let mut p = case.params();
            let (_, analytic) = case.loss_and_grad(&p);
            for i in 0..p.len() {
                let orig = p[i];
                p[i] = orig + STEP;
                let plus = case.loss_and_grad(&p).0;
                p[i] = orig - STEP;
                let minus = case.loss_and_grad(&p).0;
                p[i] = orig;
                let numeric = (plus - minus) / (2.0 * STEP);
                assert!(
                    (analytic[i] - numeric).abs() < 1e-8,
                    "{} vs {numeric}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }
}
