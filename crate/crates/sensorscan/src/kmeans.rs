//! Seeded k-means with k-means++ initialization, multiple restarts, and
//! empty-cluster repair. Used for normal-state subsampling and the
//! PCA + k-means baseline.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::util::{derive_seed, rng_from_seed};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmeansConfig {
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Convergence threshold on the largest centroid movement.
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_restarts() -> usize {
    10
}
fn default_max_iters() -> usize {
    300
}
fn default_tol() -> f64 {
    1e-6
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            restarts: default_restarts(),
            max_iters: default_max_iters(),
            tol: default_tol(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KmeansFit {
    /// k×D centroid matrix.
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Sum of squared distances of each point to its centroid.
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (ties toward the lower index).
fn nearest(centroids: &Tensor, point: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.rows() {
        let d = sq_dist(centroids.row(c), point);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Assign every row of `points` to its nearest centroid.
pub fn assign(centroids: &Tensor, points: &Tensor) -> Vec<usize> {
    (0..points.rows())
        .map(|i| nearest(centroids, points.row(i)).0)
        .collect()
}

/// k-means++ seeding: first center uniform, then each next center drawn with
/// probability proportional to the squared distance to the nearest chosen one.
fn init_plus_plus(data: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (n, d) = (data.rows(), data.cols());
    let mut centroids = Tensor::zeros(&[k, d]);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(data.row(first));
    let mut dists: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = dists.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dists.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining points coincide with existing centers.
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(data.row(pick));
        for (i, dist) in dists.iter_mut().enumerate() {
            *dist = dist.min(sq_dist(data.row(i), centroids.row(c)));
        }
    }
    centroids
}

/// One Lloyd run from a k-means++ start. Returns (centroids, assignments,
/// inertia). An emptied cluster is re-seeded with the point farthest from
/// its current centroid.
fn lloyd(data: &Tensor, k: usize, cfg: &KmeansConfig, rng: &mut ChaCha8Rng) -> KmeansFit {
    let (n, d) = (data.rows(), data.cols());
    let mut centroids = init_plus_plus(data, k, rng);
    let mut assignments = vec![0usize; n];
    for _ in 0..cfg.max_iters {
        for (i, a) in assignments.iter_mut().enumerate() {
            *a = nearest(&centroids, data.row(i)).0;
        }
        let mut sums = Tensor::zeros(&[k, d]);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums.row_mut(a).iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        let mut new_centroids = Tensor::zeros(&[k, d]);
        for c in 0..k {
            if counts[c] > 0 {
                for (o, &s) in new_centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *o = s / counts[c] as f64;
                }
            } else {
                // Repair: take the point farthest from its assigned centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(data.row(a), centroids.row(assignments[a]));
                        let db = sq_dist(data.row(b), centroids.row(assignments[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .expect("nonempty data");
                new_centroids.row_mut(c).copy_from_slice(data.row(far));
            }
        }
        let moved = (0..k)
            .map(|c| sq_dist(centroids.row(c), new_centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = new_centroids;
        if moved < cfg.tol {
            break;
        }
    }
    for (i, a) in assignments.iter_mut().enumerate() {
        *a = nearest(&centroids, data.row(i)).0;
    }
    let inertia = (0..n)
        .map(|i| sq_dist(data.row(i), centroids.row(assignments[i])))
        .sum();
    KmeansFit {
        centroids,
        assignments,
        inertia,
    }
}

/// Fit k-means on the rows of `data`: `cfg.restarts` independent seeded runs,
/// keeping the fit with the lowest inertia (ties toward the earlier restart).
pub fn kmeans(data: &Tensor, k: usize, cfg: &KmeansConfig, seed: u64) -> Result<KmeansFit> {
    let n = data.rows();
    if k == 0 || k > n {
        return Err(Error::Validation(format!(
            "kmeans: k = {k} must lie in 1..={n} (number of points)"
        )));
    }
    if cfg.restarts == 0 {
        return Err(Error::Validation("kmeans: restarts must be ≥ 1".into()));
    }
    let mut best: Option<KmeansFit> = None;
    for r in 0..cfg.restarts {
        let mut rng = rng_from_seed(derive_seed(seed, &[0x4B4D, r as u64]));
        let fit = lloyd(data, k, cfg, &mut rng);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `k` Gaussian blobs with the given per-blob size and spread.
    fn blobs(k: usize, per: usize, spread: f64, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = rng_from_seed(seed);
        let mut data = Tensor::zeros(&[k * per, 2]);
        let mut labels = Vec::with_capacity(k * per);
        for b in 0..k {
            let cx = (b as f64) * 10.0;
            let cy = (b % 2) as f64 * 10.0;
            for i in 0..per {
                let r = b * per + i;
                data.set(r, 0, cx + spread * rng.random_range(-1.0..1.0));
                data.set(r, 1, cy + spread * rng.random_range(-1.0..1.0));
                labels.push(b);
            }
        }
        (data, labels)
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let (data, labels) = blobs(3, 20, 0.5, 1);
        let fit = kmeans(&data, 3, &KmeansConfig::default(), 7).unwrap();
        // Each true blob maps to exactly one cluster.
        for b in 0..3 {
            let members: Vec<usize> = (0..60)
                .filter(|&i| labels[i] == b)
                .map(|i| fit.assignments[i])
                .collect();
            assert!(members.windows(2).all(|w| w[0] == w[1]), "blob {b} split");
        }
    }

    #[test]
    fn inertia_is_never_increased_by_an_extra_lloyd_iteration() {
        let (data, _) = blobs(4, 15, 2.0, 2);
        let mut last = f64::INFINITY;
        for iters in 1..8 {
            let cfg = KmeansConfig {
                restarts: 1,
                max_iters: iters,
                tol: 0.0,
            };
            let fit = kmeans(&data, 4, &cfg, 3).unwrap();
            assert!(
                fit.inertia <= last + 1e-9,
                "iteration {iters} increased inertia: {last} → {}",
                fit.inertia
            );
            last = fit.inertia;
        }
    }

    #[test]
    fn deterministic_given_seed_and_sensitive_to_it() {
        let (data, _) = blobs(3, 10, 3.0, 4);
        let a = kmeans(&data, 3, &KmeansConfig::default(), 11).unwrap();
        let b = kmeans(&data, 3, &KmeansConfig::default(), 11).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn empty_cluster_is_reseeded_with_a_far_point() {
        // k = 3 on data with only 2 distinct locations plus one outlier:
        // some restart will empty a cluster; the fit must still produce 3
        // nonempty clusters covering the outlier.
        let mut data = Tensor::zeros(&[9, 1]);
        for i in 0..4 {
            data.set(i, 0, 0.0);
        }
        for i in 4..8 {
            data.set(i, 0, 1.0);
        }
        data.set(8, 0, 50.0);
        let fit = kmeans(&data, 3, &KmeansConfig::default(), 5).unwrap();
        let mut seen = [false; 3];
        for &a in &fit.assignments {
            seen[a] = true;
        }
        assert!(seen.iter().all(|&s| s), "all clusters populated: {:?}", fit.assignments);
        // The outlier sits in its own cluster.
        let outlier_cluster = fit.assignments[8];
        assert_eq!(
            fit.assignments.iter().filter(|&&a| a == outlier_cluster).count(),
            1
        );
    }

    #[test]
    fn rejects_bad_k() {
        let (data, _) = blobs(2, 5, 1.0, 6);
        assert!(kmeans(&data, 0, &KmeansConfig::default(), 1).is_err());
        assert!(kmeans(&data, 11, &KmeansConfig::default(), 1).is_err());
    }

    #[test]
    fn assign_uses_nearest_centroid_with_low_index_ties() {
        let centroids = Tensor::from_vec(&[2, 1], vec![0.0, 2.0]);
        let points = Tensor::from_vec(&[3, 1], vec![0.4, 1.9, 1.0]);
        // 1.0 is equidistant → lower index wins.
        assert_eq!(assign(&centroids, &points), vec![0, 1, 0]);
    }
}
