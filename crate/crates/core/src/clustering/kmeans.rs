use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seeded_rng;

pub const MAX_ITERATIONS: usize = 300;
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid of every point (lowest index on ties) and its squared
/// distance.
fn assign(data: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    data.row_iter()
        .map(|x| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.row_iter().enumerate() {
                let d = sq_dist(x, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .unzip()
}

fn kmeans_pp(data: &Matrix, k: usize, rng: &mut impl Rng) -> Matrix {
    let n = data.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = data.row_iter().map(|x| sq_dist(x, data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // rounding can run past the last positive weight
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        chosen.push(next);
        for (i, x) in data.row_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, data.row(next)));
        }
    }
    data.select_rows(&chosen).expect("indices in range")
}

/// Cluster means of `labels`. An empty cluster is moved onto the point
/// farthest from its current centroid (lowest index on ties), skipping points
/// already used this way.
fn update_centroids(data: &Matrix, labels: &[usize], dists: &[f64], old: &Matrix) -> Matrix {
    let (k, dim) = old.shape();
    let mut sums = Matrix::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (x, &l) in data.row_iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(x) {
            *s += v;
        }
    }
    let mut taken = vec![false; data.rows()];
    for (j, &count) in counts.iter().enumerate() {
        if count > 0 {
            let c = count as f64;
            sums.row_mut(j).iter_mut().for_each(|s| *s /= c);
            continue;
        }
        let far = (0..data.rows())
            .filter(|&i| !taken[i])
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            })
            .expect("k <= n leaves a free point");
        taken[far] = true;
        sums.row_mut(j).copy_from_slice(data.row(far));
    }
    sums
}

/// One Lloyd run from the given centroids. Returns the result and the
/// inertia after every assignment step.
pub(crate) fn lloyd(data: &Matrix, init: Matrix, max_iter: usize) -> (ClusteringResult, Vec<f64>) {
    let mut centroids = init;
    let (mut labels, mut dists) = assign(data, &centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    for _ in 0..max_iter {
        centroids = update_centroids(data, &labels, &dists, &centroids);
        let (next, next_d) = assign(data, &centroids);
        history.push(next_d.iter().sum());
        let converged = next == labels;
        labels = next;
        dists = next_d;
        if converged {
            break;
        }
    }
    let inertia = dists.iter().sum();
    (
        ClusteringResult {
            assignments: labels,
            centroids,
            inertia,
        },
        history,
    )
}

/// k-means++ seeding and Lloyd iterations, best of `restarts` runs by
/// inertia. Every restart draws from its own stream of `seed`.
pub fn kmeans(data: &Matrix, k: usize, seed: u64, restarts: usize) -> Result<ClusteringResult> {
    if k == 0 || k > data.rows() {
        return Err(Error::Contract(format!(
            "k-means needs 1 <= k <= n, got k = {k}, n = {}",
            data.rows()
        )));
    }
    if restarts == 0 {
        return Err(Error::Contract("k-means needs at least one restart".into()));
    }
    let runs: Vec<ClusteringResult> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = seeded_rng(seed, crate::STREAM_KMEANS + r as u64);
            let init = kmeans_pp(data, k, &mut rng);
            lloyd(data, init, MAX_ITERATIONS).0
        })
        .collect();
    Ok(runs
        .into_iter()
        .reduce(|best, r| if r.inertia < best.inertia { r } else { best })
        .expect("at least one restart"))
}
