use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const MOVEMENT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub proportions: Vec<f64>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl Clustering {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == cluster).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], row: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, row);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_init(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut centroids = vec![rows[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(rows[pick].clone());
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Seeded k-means with k-means++ initialisation.  Runs at most
/// [`MAX_ITERATIONS`] Lloyd iterations and stops early once no centroid moves
/// by more than [`MOVEMENT_TOLERANCE`].  A cluster that becomes empty is
/// re-seeded with the point farthest from its current centroid.
pub fn cluster_rows(rows: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    let n = rows.len();
    if k == 0 {
        return Err(Error::Learning("k-means needs k >= 1".into()));
    }
    if n < k {
        return Err(Error::Learning(format!("k-means with k = {k} needs at least {k} rows, got {n}")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::input("rows have different lengths"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite entry in clustering data"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(rows, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut dist = vec![0.0; n];
        for (i, r) in rows.iter().enumerate() {
            let (c, d2) = nearest(&centroids, r);
            assignments[i] = c;
            dist[i] = d2;
        }
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // farthest point from its centroid, taken from a cluster that can spare one
            let donor = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = donor {
                counts[assignments[i]] -= 1;
                assignments[i] = c;
                counts[c] += 1;
                dist[i] = 0.0;
            }
        }

        let mut sums = vec![vec![0.0; d]; k];
        for (r, &a) in rows.iter().zip(&assignments) {
            for (s, v) in sums[a].iter_mut().zip(r) {
                *s += v;
            }
        }
        let mut movement: f64 = 0.0;
        for c in 0..k {
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            movement = movement.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        if movement < MOVEMENT_TOLERANCE {
            break;
        }
    }

    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    let proportions = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Ok(Clustering { assignments, proportions, centroids, iterations })
}
