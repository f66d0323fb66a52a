use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment pass, starting with the seeding.
    pub history: Vec<f64>,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid for every point (ties go to the lower index).
fn assign(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    (0..points.rows())
        .into_par_iter()
        .with_min_len(64)
        .map(|i| {
            let p = points.row(i);
            let mut best = (0usize, f64::INFINITY);
            for c in 0..centroids.rows() {
                let d = sq_dist(p, centroids.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

/// k-means++ seeding with squared-distance weights.
fn seed_centroids(points: &Matrix, k: usize, rng: &mut impl Rng) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Stops at an assignment
/// fixpoint or after `max_iter` updates. A cluster that ends up empty is
/// re-seeded at the point farthest from its current centroid.
pub fn kmeans(points: &Matrix, k: usize, max_iter: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::InvalidInput("k-means: k must be positive".into()));
    }
    if k > n {
        return Err(Error::TooManyClusters { k, points: n });
    }
    let mut rng = rng::seeded(seed);
    let d = points.cols();
    let mut centroids = seed_centroids(points, k, &mut rng);
    let (mut assignment, mut dists) = assign(points, &centroids);
    let mut history = vec![dists.iter().sum::<f64>()];

    for _ in 0..max_iter {
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = counts[c] as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / inv;
                }
            } else {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= n leaves a candidate");
                taken.push(far);
                centroids.row_mut(c).copy_from_slice(points.row(far));
            }
        }
        let (next, next_d) = assign(points, &centroids);
        history.push(next_d.iter().sum());
        dists = next_d;
        let converged = next == assignment;
        assignment = next;
        if converged {
            break;
        }
    }

    Ok(KMeansResult {
        centroids,
        assignment,
        inertia: *history.last().unwrap(),
        history,
    })
}
