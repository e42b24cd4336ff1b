//! Lloyd k-means with k-means++ seeding and empty-cluster repair.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::seeded_rng;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Objective (sum of squared distances to the assigned centroid) after
    /// every Lloyd iteration; non-increasing.
    pub objective_trace: Vec<f64>,
}

const MAX_ITERS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn assign_points(feats: &Array2<f64>, centroids: &Array2<f64>) -> Vec<usize> {
    let k = centroids.dim().0;
    let n = feats.dim().0;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let r = feats.row(i);
            let r = r.as_slice().unwrap();
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(r, centroids.row(c).as_slice().unwrap());
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn objective(feats: &Array2<f64>, centroids: &Array2<f64>, assignments: &[usize]) -> f64 {
    let mut acc = 0.0;
    for (i, &a) in assignments.iter().enumerate() {
        acc += sq_dist(feats.row(i).as_slice().unwrap(), centroids.row(a).as_slice().unwrap());
    }
    acc
}

/// k-means++ seeding: iteratively picks points with probability
/// proportional to their squared distance to the nearest chosen center.
fn kmeanspp_init(feats: &Array2<f64>, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Array2<f64> {
    let (n, d) = feats.dim();
    let mut centroids = Array2::<f64>::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&feats.row(first));
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(feats.row(i).as_slice().unwrap(), centroids.row(0).as_slice().unwrap()))
        .collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total <= 0.0 {
            // all remaining points coincide with a center; pick round-robin
            c % n
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centroids.row_mut(c).assign(&feats.row(pick));
        for i in 0..n {
            let d2 = sq_dist(feats.row(i).as_slice().unwrap(), centroids.row(c).as_slice().unwrap());
            if d2 < dist[i] {
                dist[i] = d2;
            }
        }
    }
    centroids
}

/// Repairs empty clusters by seeding them with the point farthest from its
/// centroid inside the currently largest cluster.
fn repair_empty(
    feats: &Array2<f64>,
    centroids: &mut Array2<f64>,
    assignments: &mut [usize],
    counts: &mut [usize],
) {
    let k = counts.len();
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let largest = (0..k).max_by_key(|&c| counts[c]).unwrap();
        if counts[largest] <= 1 {
            // nothing to split; leave the centroid where it is
            continue;
        }
        let mut far_idx = None;
        let mut far_d = -1.0;
        for (i, &a) in assignments.iter().enumerate() {
            if a == largest {
                let d = sq_dist(feats.row(i).as_slice().unwrap(), centroids.row(largest).as_slice().unwrap());
                if d > far_d {
                    far_d = d;
                    far_idx = Some(i);
                }
            }
        }
        if let Some(i) = far_idx {
            centroids.row_mut(empty).assign(&feats.row(i));
            assignments[i] = empty;
            counts[largest] -= 1;
            counts[empty] += 1;
        }
    }
}

fn update_centroids(feats: &Array2<f64>, assignments: &[usize], k: usize) -> (Array2<f64>, Vec<usize>) {
    let d = feats.dim().1;
    let mut centroids = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        let mut row = centroids.row_mut(a);
        row += &feats.row(i);
    }
    for c in 0..k {
        if counts[c] > 0 {
            let mut row = centroids.row_mut(c);
            row /= counts[c] as f64;
        }
    }
    (centroids, counts)
}

/// Lloyd iterations to convergence (assignments stable) or 100 iterations.
pub fn kmeans(feats: &Array2<f64>, k: usize, seed: u64) -> Result<KmeansResult> {
    let n = feats.dim().0;
    if k == 0 {
        return Err(Error::Validation("kmeans needs k >= 1".into()));
    }
    if k > n {
        return Err(Error::Validation(format!("kmeans k={k} exceeds point count {n}")));
    }
    let mut rng = seeded_rng(seed, "kmeans-init");
    let mut centroids = kmeanspp_init(feats, k, &mut rng);
    let mut assignments = assign_points(feats, &centroids);
    let mut trace = Vec::new();
    for _ in 0..MAX_ITERS {
        let (mut new_centroids, mut counts) = update_centroids(feats, &assignments, k);
        let mut new_assignments = assignments.clone();
        repair_empty(feats, &mut new_centroids, &mut new_assignments, &mut counts);
        if counts.iter().any(|&c| c == 0) {
            // repair could not fill every cluster (massive duplication);
            // recompute means for what we have
            let (c2, _) = update_centroids(feats, &new_assignments, k);
            new_centroids = c2;
        }
        let reassigned = assign_points(feats, &new_centroids);
        let obj = objective(feats, &new_centroids, &reassigned);
        let converged = reassigned == assignments;
        centroids = new_centroids;
        assignments = reassigned;
        trace.push(obj);
        if converged {
            break;
        }
    }
    Ok(KmeansResult { centroids, assignments, objective_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(center: (f64, f64), n: usize, spread: f64, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = seeded_rng(seed, "blob");
        (0..n)
            .map(|_| {
                [
                    center.0 + rng.random_range(-spread..spread),
                    center.1 + rng.random_range(-spread..spread),
                ]
            })
            .collect()
    }

    #[test]
    fn k_equals_n_gives_zero_objective() {
        let pts = ndarray::array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0]];
        let res = kmeans(&pts, 4, 1).unwrap();
        let last = *res.objective_trace.last().unwrap();
        assert!(last.abs() < 1e-12);
        let mut seen: Vec<usize> = res.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 4, "each point gets its own centroid");
    }

    #[test]
    fn k_one_is_the_mean() {
        let pts = ndarray::array![[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]];
        let res = kmeans(&pts, 1, 3).unwrap();
        assert!((res.centroids[[0, 0]] - 3.0).abs() < 1e-12);
        assert!((res.centroids[[0, 1]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_blobs_match_exhaustive_assignment_oracle() {
        let mut pts = blob((0.0, 0.0), 10, 0.3, 5);
        pts.extend(blob((10.0, 10.0), 10, 0.3, 6));
        let feats = Array2::from_shape_fn((20, 2), |(i, j)| pts[i][j]);
        let res = kmeans(&feats, 2, 7).unwrap();

        // Oracle: enumerate all 2^20 assignments, find the optimal objective.
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << 20) - 1 {
            let mut sums = [[0.0f64; 2]; 2];
            let mut counts = [0usize; 2];
            for i in 0..20 {
                let c = ((mask >> i) & 1) as usize;
                sums[c][0] += feats[[i, 0]];
                sums[c][1] += feats[[i, 1]];
                counts[c] += 1;
            }
            if counts[0] == 0 || counts[1] == 0 {
                continue;
            }
            let mut obj = 0.0;
            for i in 0..20 {
                let c = ((mask >> i) & 1) as usize;
                let dx = feats[[i, 0]] - sums[c][0] / counts[c] as f64;
                let dy = feats[[i, 1]] - sums[c][1] / counts[c] as f64;
                obj += dx * dx + dy * dy;
            }
            if obj < best {
                best = obj;
            }
        }
        let ours = *res.objective_trace.last().unwrap();
        assert!(ours <= best + 1e-9, "kmeans objective {ours} worse than exhaustive optimum {best}");

        // Centroids land within 0.1 of the blob means.
        let mean_a: [f64; 2] = [
            pts[..10].iter().map(|p| p[0]).sum::<f64>() / 10.0,
            pts[..10].iter().map(|p| p[1]).sum::<f64>() / 10.0,
        ];
        let mean_b: [f64; 2] = [
            pts[10..].iter().map(|p| p[0]).sum::<f64>() / 10.0,
            pts[10..].iter().map(|p| p[1]).sum::<f64>() / 10.0,
        ];
        let c0 = [res.centroids[[0, 0]], res.centroids[[0, 1]]];
        let c1 = [res.centroids[[1, 0]], res.centroids[[1, 1]]];
        let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let direct = d(c0, mean_a).max(d(c1, mean_b));
        let swapped = d(c0, mean_b).max(d(c1, mean_a));
        assert!(direct.min(swapped) < 0.1);
    }

    #[test]
    fn objective_trace_monotone_and_assignment_is_argmin() {
        let mut rng = seeded_rng(8, "kmeans-mono");
        let feats = Array2::from_shape_fn((120, 6), |_| rng.random_range(-1.0..1.0));
        let res = kmeans(&feats, 7, 9).unwrap();
        for w in res.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "objective increased: {} -> {}", w[0], w[1]);
        }
        for i in 0..120 {
            let assigned = sq_dist(
                feats.row(i).as_slice().unwrap(),
                res.centroids.row(res.assignments[i]).as_slice().unwrap(),
            );
            for c in 0..7 {
                let d = sq_dist(feats.row(i).as_slice().unwrap(), res.centroids.row(c).as_slice().unwrap());
                assert!(assigned <= d + 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_points_trigger_repair_without_empty_clusters() {
        // 30 copies of just three distinct points, k=3.
        let mut feats = Array2::<f64>::zeros((30, 2));
        for i in 0..30 {
            let p = i % 3;
            feats[[i, 0]] = p as f64 * 4.0;
            feats[[i, 1]] = -(p as f64);
        }
        let res = kmeans(&feats, 3, 11).unwrap();
        let mut counts = [0usize; 3];
        for &a in &res.assignments {
            counts[a] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "cluster sizes {counts:?}");
        assert!(*res.objective_trace.last().unwrap() < 1e-12);
    }

    #[test]
    fn k_larger_than_n_rejected() {
        let feats = Array2::<f64>::zeros((3, 2));
        assert!(kmeans(&feats, 4, 1).is_err());
    }

    #[test]
    fn same_seed_same_result() {
        let mut rng = seeded_rng(10, "kmeans-det");
        let feats = Array2::from_shape_fn((60, 4), |_| rng.random_range(-1.0..1.0));
        let a = kmeans(&feats, 5, 21).unwrap();
        let b = kmeans(&feats, 5, 21).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids, b.centroids);
    }
}
