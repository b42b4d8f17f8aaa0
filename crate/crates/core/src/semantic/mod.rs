//! Semantic consistency between query and distractor cells.
//!
//! The likelihood that query cell `i` matches distractor cell `j` is a
//! temperature softmax over the dot products of their auxiliary embeddings.
//! The table is built once per search case and drives both the prefilter and
//! the semantic term of the combined objective.

mod kmeans;

pub use kmeans::{cluster_images, kmeans_cells, ClusterAssignment, ImageSpan, MAX_ITERATIONS, RELATIVE_TOLERANCE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::Candidate;
use crate::numerics::{pairwise_dot, softmax_unchecked, EmbeddingGrid, Matrix};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_K_FRACTION: f64 = 0.10;

/// Scope of the softmax denominator when several distractors are present.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// One softmax over all `n * hw` distractor cells.
    #[default]
    Pooled,
    /// An independent softmax over each distractor's `hw` cells.
    PerImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTable {
    likelihood: Matrix,
    temperature: f64,
    normalization: Normalization,
    cells: usize,
    images: usize,
}

impl SimilarityTable {
    pub fn likelihood(&self) -> &Matrix {
        &self.likelihood
    }

    pub fn get(&self, cand: Candidate) -> f64 {
        self.likelihood.get(cand.query_cell, cand.column(self.cells))
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    /// Cells per image, `hw`.
    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn images(&self) -> usize {
        self.images
    }

    /// Total number of candidate pairs, `hw * n * hw`.
    pub fn pair_count(&self) -> usize {
        self.cells * self.images * self.cells
    }

    pub(crate) fn candidate_at(&self, flat: usize) -> Candidate {
        let cols = self.images * self.cells;
        let (row, col) = (flat / cols, flat % cols);
        Candidate::new(row, col / self.cells, col % self.cells)
    }
}

pub fn similarity_table(
    query: &EmbeddingGrid,
    distractors: &[EmbeddingGrid],
    temperature: f64,
    normalization: Normalization,
) -> Result<SimilarityTable> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Temperature(temperature));
    }
    if distractors.is_empty() {
        return Err(Error::Invalid("similarity table needs at least one distractor".into()));
    }
    let dots = pairwise_dot(query, distractors)?;
    let hw = query.cells();
    let mut data = Vec::with_capacity(dots.rows() * dots.cols());
    for i in 0..dots.rows() {
        let row = dots.row(i);
        match normalization {
            Normalization::Pooled => data.extend(softmax_unchecked(row, temperature)),
            Normalization::PerImage => {
                for block in row.chunks_exact(hw) {
                    data.extend(softmax_unchecked(block, temperature));
                }
            }
        }
    }
    Ok(SimilarityTable {
        likelihood: Matrix::from_vec(dots.rows(), dots.cols(), data)?,
        temperature,
        normalization,
        cells: hw,
        images: distractors.len(),
    })
}

/// `ceil(k_fraction * total)`, clamped to `[1, total]`.
///
/// A `1e-9` slack absorbs products such as `0.3 * 10 = 3.0000000000000004`.
pub fn topk_count(total: usize, k_fraction: f64) -> Result<usize> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::KFraction(k_fraction));
    }
    let raw = (k_fraction * total as f64 - 1e-9).ceil();
    Ok((raw.max(1.0) as usize).min(total))
}

/// Highest-likelihood `ceil(k * hw * n * hw)` candidates, returned in
/// lexicographic candidate order. Ties at the cut go to the lexicographically
/// smaller candidate.
pub fn prefilter_topk(table: &SimilarityTable, k_fraction: f64) -> Result<Vec<Candidate>> {
    let total = table.pair_count();
    let count = topk_count(total, k_fraction)?;
    let values = table.likelihood.data();
    let mut order: Vec<usize> = (0..total).collect();
    if count < total {
        // row-major flat index order coincides with lexicographic candidate order
        let by_rank = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
        order.select_nth_unstable_by(count - 1, by_rank);
        order.truncate(count);
        order.sort_unstable();
    }
    Ok(order.into_iter().map(|f| table.candidate_at(f)).collect())
}

/// Every `(i, m, j)` whose query cell and distractor cell share a cluster.
pub fn hard_constraint_candidates(
    assignment: &ClusterAssignment,
    query_image: &str,
    distractor_images: &[&str],
) -> Result<Vec<Candidate>> {
    let query = assignment.image_labels(query_image)?;
    let distractors = distractor_images
        .iter()
        .map(|id| assignment.image_labels(id))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (i, ql) in query.iter().enumerate() {
        for (m, labels) in distractors.iter().enumerate() {
            for (j, dl) in labels.iter().enumerate() {
                if ql == dl {
                    out.push(Candidate::new(i, m, j));
                }
            }
        }
    }
    Ok(out)
}
