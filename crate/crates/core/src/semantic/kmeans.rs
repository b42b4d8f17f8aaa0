//! Seeded Lloyd's K-Means with k-means++ initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::EmbeddingGrid;

pub const MAX_ITERATIONS: usize = 300;
pub const RELATIVE_TOLERANCE: f64 = 1e-4;

/// Contiguous range of clustered rows that belong to one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSpan {
    pub id: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centers: Vec<f64>,
    /// One cluster id per input row.
    pub labels: Vec<usize>,
    pub seed: u64,
    pub inertia: f64,
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Empty when rows were clustered without image bookkeeping.
    #[serde(default)]
    pub images: Vec<ImageSpan>,
}

impl ClusterAssignment {
    pub fn center(&self, c: usize) -> &[f64] {
        &self.centers[c * self.dim..(c + 1) * self.dim]
    }

    /// Labels of the cells of one image, in cell order.
    pub fn image_labels(&self, id: &str) -> Result<&[usize]> {
        let span = self
            .images
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::UnknownImage(id.to_string()))?;
        Ok(&self.labels[span.start..span.start + span.len])
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Clusters `data` (rows of length `dim`) into `k` groups.
pub fn kmeans_cells(data: &[f32], dim: usize, k: usize, seed: u64) -> Result<ClusterAssignment> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::shape(format!(
            "{} values do not form rows of length {dim}",
            data.len()
        )));
    }
    let n = data.len() / dim;
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::TooManyClusters { k, points: n });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cluster input".into()));
    }
    let points: Vec<f64> = data.iter().map(|&v| f64::from(v)).collect();
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(&points, dim, k, &mut rng);

    let mut history = Vec::new();
    let mut labels = vec![0usize; n];
    let mut dists = vec![0f64; n];
    let mut iterations = 0;
    for iter in 0..MAX_ITERATIONS {
        iterations = iter + 1;
        let assigned: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(point(i), &centers, dim))
            .collect();
        for (i, (l, d)) in assigned.into_iter().enumerate() {
            labels[i] = l;
            dists[i] = d;
        }
        let inertia: f64 = dists.iter().sum();
        history.push(inertia);
        if inertia == 0.0 {
            break;
        }
        if let [.., prev, cur] = history[..] {
            if (prev - cur) / prev < RELATIVE_TOLERANCE {
                break;
            }
        }
        if iter + 1 == MAX_ITERATIONS {
            break;
        }

        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, &v) in sums[labels[i] * dim..(labels[i] + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed with the point farthest from its own center.
                let far = (0..n).fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                counts[labels[far]] -= 1;
                for (s, &v) in sums[labels[far] * dim..(labels[far] + 1) * dim].iter_mut().zip(point(far)) {
                    *s -= v;
                }
                labels[far] = c;
                dists[far] = 0.0;
                counts[c] = 1;
                sums[c * dim..(c + 1) * dim].copy_from_slice(point(far));
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, &s) in centers[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }

    Ok(ClusterAssignment {
        k,
        dim,
        centers,
        labels,
        seed,
        inertia: *history.last().unwrap_or(&0.0),
        inertia_history: history,
        iterations,
        max_iterations: MAX_ITERATIONS,
        tolerance: RELATIVE_TOLERANCE,
        images: Vec::new(),
    })
}

/// Clusters the cells of several images jointly and remembers which rows
/// belong to which image.
pub fn cluster_images(images: &[(&str, &EmbeddingGrid)], k: usize, seed: u64) -> Result<ClusterAssignment> {
    let Some((_, first)) = images.first() else {
        return Err(Error::Invalid("no images to cluster".into()));
    };
    let dim = first.channels();
    let mut data = Vec::new();
    let mut spans = Vec::with_capacity(images.len());
    for (id, grid) in images {
        if grid.channels() != dim {
            return Err(Error::shape(format!(
                "embedding `{id}` has {} channels, expected {dim}",
                grid.channels()
            )));
        }
        spans.push(ImageSpan {
            id: id.to_string(),
            start: data.len() / dim,
            len: grid.cells(),
        });
        data.extend_from_slice(grid.data());
    }
    let mut assignment = kmeans_cells(&data, dim, k, seed)?;
    assignment.images = spans;
    Ok(assignment)
}

fn nearest(p: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > r {
                    break;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every remaining point coincides with a center
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(point(i), point(next)));
        }
    }
    chosen.iter().flat_map(|&i| point(i).iter().copied()).collect()
}
