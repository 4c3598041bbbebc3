//! Seeded k-means with k-means++ initialization, used on Laplacian
//! eigen-embeddings. Restarts keep the assignment with the lowest
//! within-cluster sum of squares; empty clusters are repaired by moving the
//! point farthest from its own centroid.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const MAX_ITERS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroid_rows(points: &Array2<f64>, labels: &[usize], k: usize) -> Array2<f64> {
    let d = points.ncols();
    let mut centroids = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, &g) in labels.iter().enumerate() {
        counts[g] += 1;
        for j in 0..d {
            centroids[[g, j]] += points[[i, j]];
        }
    }
    for g in 0..k {
        if counts[g] > 0 {
            for j in 0..d {
                centroids[[g, j]] /= counts[g] as f64;
            }
        }
    }
    centroids
}

/// k-means++ seeding. When all remaining distances are zero (duplicate
/// points), falls back to the lowest-index point not already chosen.
fn plus_plus_init(points: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.nrows();
    let mut chosen: Vec<usize> = vec![rng.gen_range(0..n)];

    while chosen.len() < k {
        let dists: Vec<f64> = (0..n)
            .map(|i| {
                chosen
                    .iter()
                    .map(|&c| sq_dist(points.row(i).as_slice().unwrap(), points.row(c).as_slice().unwrap()))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in dists.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
    }
    chosen
}

fn assign(points: &Array2<f64>, centroids: &Array2<f64>, labels: &mut [usize]) -> bool {
    let mut changed = false;
    for i in 0..points.nrows() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for g in 0..centroids.nrows() {
            let d = sq_dist(
                points.row(i).as_slice().unwrap(),
                centroids.row(g).as_slice().unwrap(),
            );
            if d < best_d {
                best_d = d;
                best = g;
            }
        }
        if labels[i] != best {
            labels[i] = best;
            changed = true;
        }
    }
    changed
}

/// Moves the point farthest from its own centroid into each empty cluster.
/// Only clusters with more than one member donate, so repaired partitions
/// stay fully non-empty; ties break toward the lowest point index.
fn repair_empty(points: &Array2<f64>, labels: &mut [usize], centroids: &Array2<f64>, k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &g in labels.iter() {
            counts[g] += 1;
        }
        let Some(empty) = (0..k).find(|&g| counts[g] == 0) else {
            return;
        };
        let mut donor: Option<(usize, f64)> = None;
        for i in 0..points.nrows() {
            if counts[labels[i]] <= 1 {
                continue;
            }
            let d = sq_dist(
                points.row(i).as_slice().unwrap(),
                centroids.row(labels[i]).as_slice().unwrap(),
            );
            if donor.map_or(true, |(_, best)| d > best) {
                donor = Some((i, d));
            }
        }
        match donor {
            Some((i, _)) => labels[i] = empty,
            // Fewer distinct points than clusters; nothing more to repair.
            None => return,
        }
    }
}

fn wcss(points: &Array2<f64>, labels: &[usize], centroids: &Array2<f64>) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            sq_dist(
                points.row(i).as_slice().unwrap(),
                centroids.row(g).as_slice().unwrap(),
            )
        })
        .sum()
}

fn run_once(points: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = points.nrows();
    let seeds = plus_plus_init(points, k, rng);
    let d = points.ncols();
    let mut centroids = Array2::<f64>::zeros((k, d));
    for (g, &s) in seeds.iter().enumerate() {
        for j in 0..d {
            centroids[[g, j]] = points[[s, j]];
        }
    }

    let mut labels = vec![0usize; n];
    assign(points, &centroids, &mut labels);
    repair_empty(points, &mut labels, &centroids, k);

    for _ in 0..MAX_ITERS {
        centroids = centroid_rows(points, &labels, k);
        let changed = assign(points, &centroids, &mut labels);
        repair_empty(points, &mut labels, &centroids, k);
        if !changed {
            break;
        }
    }
    let centroids = centroid_rows(points, &labels, k);
    let cost = wcss(points, &labels, &centroids);
    (labels, cost)
}

/// Clusters the rows of `points` into `k` groups. Deterministic for a given
/// RNG state; the best of `restarts` runs (lowest cost, earliest run on ties)
/// is returned.
pub fn cluster(points: &Array2<f64>, k: usize, restarts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let restarts = restarts.max(1);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..restarts {
        let (labels, cost) = run_once(points, k, rng);
        if best.as_ref().map_or(true, |(_, c)| cost < *c) {
            best = Some((labels, cost));
        }
    }
    best.unwrap().0
}
