//! Inputs shared by the benchmarks.

use fast_core::dataset::SynthSpec;
use fast_core::sampler::{few_shot_split, FewShotSpec};
use fast_core::{build_cache, synth_generate, CacheModel, Dataset, Matrix};

/// A synthetic dataset with `bags` bags per class of 200 instances.
pub fn dataset(bags: usize) -> Dataset {
    synth_generate(&SynthSpec {
        bags_per_class: bags,
        noise_sigma: 0.6,
        ..SynthSpec::default()
    })
    .expect("valid spec")
}

/// A cache over a 16/16 split of `ds` and the first `queries` rows as queries.
pub fn cache_and_queries(ds: &Dataset, queries: usize) -> (CacheModel, Matrix) {
    let split = few_shot_split(
        ds,
        &FewShotSpec {
            bag_shot: ds.bags.len() / ds.num_classes(),
            ..FewShotSpec::default()
        },
    )
    .expect("valid split");
    let cache = build_cache(&split, &ds.store, ds.num_classes(), 10.0).expect("valid cache");
    let rows: Vec<usize> = (0..queries.min(ds.store.n())).collect();
    (cache, ds.store.rows.select_rows(&rows))
}

/// Scores with ties and their labels, from a fixed linear congruence.
pub fn scores(n: usize) -> (Vec<f64>, Vec<bool>) {
    let mut x: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut s = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        x = x
            .wrapping_mul(6_364_136_223_846_793_005)
            .wrapping_add(1_442_695_040_888_963_407);
        s.push(((x >> 40) % 1000) as f64 / 1000.0);
        y.push((x >> 20) & 3 == 0);
    }
    (s, y)
}
