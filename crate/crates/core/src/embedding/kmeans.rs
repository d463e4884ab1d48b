//! Lloyd's k-means with seeded k-means++ initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::geometry::squared_euclidean;
use super::Embedding;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// Point ids in input order.
    pub ids: Vec<String>,
    /// Cluster index per point, aligned with `ids`.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl ClusterResult {
    pub fn assignment(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id).map(|i| self.labels[i])
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Point indices grouped by cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &c) in self.labels.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

pub fn kmeans(points: &[Embedding], k: usize, seed: u64) -> Result<ClusterResult> {
    kmeans_with_max_iter(points, k, seed, DEFAULT_MAX_ITER)
}

pub fn kmeans_with_max_iter(
    points: &[Embedding],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<ClusterResult> {
    if points.is_empty() {
        return Err(Error::Precondition("k-means on an empty point set".into()));
    }
    if k == 0 || k > points.len() {
        return Err(Error::Precondition(format!(
            "k-means needs 1 <= k <= {} points, got k = {k}",
            points.len()
        )));
    }
    let dim = points[0].vector.len();
    if let Some(p) = points.iter().find(|p| p.vector.len() != dim) {
        return Err(Error::Geometry(format!(
            "point `{}` has dimension {}, expected {dim}",
            p.id,
            p.vector.len()
        )));
    }
    let data: Vec<&[f64]> = points.iter().map(|p| p.vector.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(&data, k, &mut rng);

    let (mut labels, inertia) = assign(&data, &centroids);
    let mut trace = vec![inertia];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        centroids = update(&data, &labels, &centroids);
        let (next, inertia) = assign(&data, &centroids);
        trace.push(inertia);
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(ClusterResult {
        ids: points.iter().map(|p| p.id.clone()).collect(),
        labels,
        centroids,
        inertia: *trace.last().expect("non-empty trace"),
        inertia_trace: trace,
        iterations,
    })
}

fn plus_plus_init(data: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..data.len())];
    let mut d2: Vec<f64> = data
        .iter()
        .map(|p| squared_euclidean(p, data[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // All remaining points coincide with a centroid.
            (0..data.len())
                .find(|i| !chosen.contains(i))
                .expect("k <= n")
        };
        chosen.push(next);
        for (i, p) in data.iter().enumerate() {
            d2[i] = d2[i].min(squared_euclidean(p, data[next]));
        }
    }
    chosen.into_iter().map(|i| data[i].to_vec()).collect()
}

/// Nearest centroid per point (ties to the lower index) and total inertia.
fn assign(data: &[&[f64]], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = data
        .iter()
        .map(|p| {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(c, centroid)| (c, squared_euclidean(p, centroid)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            inertia += d;
            best
        })
        .collect();
    (labels, inertia)
}

/// Cluster means; an emptied cluster is moved onto the point farthest from
/// its own centroid.
fn update(data: &[&[f64]], labels: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = previous.len();
    let dim = data[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in data.iter().zip(labels) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    let mut centroids: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .zip(previous)
        .map(|((s, &n), prev)| {
            if n == 0 {
                prev.clone()
            } else {
                s.into_iter().map(|x| x / n as f64).collect()
            }
        })
        .collect();

    let mut taken = Vec::new();
    for c in (0..k).filter(|&c| counts[c] == 0) {
        let far = (0..data.len())
            .filter(|i| !taken.contains(i))
            .map(|i| (i, squared_euclidean(data[i], &centroids[labels[i]])))
            .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        if let Some((i, _)) = far {
            taken.push(i);
            centroids[c] = data[i].to_vec();
        }
    }
    centroids
}
