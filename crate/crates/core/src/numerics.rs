//! Dense grid types and the small set of reductions everything else is built on.
//!
//! Grids are stored as 32-bit floats in cell-major order: cell `i = row * width + col`
//! owns the contiguous slice `data[i * channels..(i + 1) * channels]`. Every
//! reduction accumulates in `f64`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial feature map `f(I)` reshaped to an `hw x d` cell matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width, channels, data.len(), "feature grid")?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature grid".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of spatial cells, `hw`.
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, cell: usize) -> &[f32] {
        &self.data[cell * self.channels..(cell + 1) * self.channels]
    }

    pub(crate) fn row_mut(&mut self, cell: usize) -> &mut [f32] {
        &mut self.data[cell * self.channels..(cell + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Auxiliary embedding `u(I)`: one unit-norm row per spatial cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl EmbeddingGrid {
    /// Builds an embedding grid, renormalizing every row to unit length.
    ///
    /// Rows with zero norm cannot be normalized and are rejected.
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        check_dims(height, width, channels, data.len(), "embedding grid")?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding grid".into()));
        }
        for (cell, row) in data.chunks_exact_mut(channels).enumerate() {
            let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Invalid(format!("embedding row {cell} has zero norm")));
            }
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, cell: usize) -> &[f32] {
        &self.data[cell * self.channels..(cell + 1) * self.channels]
    }
}

fn check_dims(h: usize, w: usize, d: usize, len: usize, what: &str) -> Result<()> {
    if h == 0 || w == 0 || d == 0 {
        return Err(Error::shape(format!("{what} has a zero dimension ({h}x{w}x{d})")));
    }
    if h * w * d != len {
        return Err(Error::shape(format!(
            "{what} expects {h}x{w}x{d} = {} values, got {len}",
            h * w * d
        )));
    }
    Ok(())
}

/// Class probabilities produced by the decision head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    /// Index of the largest probability; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Lowest index of the maximum value.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-channel mean over all cells.
pub fn gap(grid: &FeatureGrid) -> Vec<f32> {
    gap_f64(grid).into_iter().map(|v| v as f32).collect()
}

pub(crate) fn gap_f64(grid: &FeatureGrid) -> Vec<f64> {
    let d = grid.channels;
    let mut acc = vec![0.0f64; d];
    for row in grid.data.chunks_exact(d) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    let hw = grid.cells() as f64;
    acc.iter_mut().for_each(|a| *a /= hw);
    acc
}

/// `softmax(logits / temperature)` with max subtraction.
pub fn stable_softmax(logits: &[f64], temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Temperature(temperature));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(ProbVector(softmax_unchecked(logits, temperature)))
}

pub(crate) fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Row-major dense `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Dot products between every query cell and every distractor cell.
///
/// Column `j` indexes distractor cells image-major: `j = image * hw + cell`.
pub fn pairwise_dot(query: &EmbeddingGrid, distractors: &[EmbeddingGrid]) -> Result<Matrix> {
    for (m, dist) in distractors.iter().enumerate() {
        if dist.channels != query.channels {
            return Err(Error::shape(format!(
                "distractor embedding {m} has {} channels, query has {}",
                dist.channels, query.channels
            )));
        }
        if dist.height != query.height || dist.width != query.width {
            return Err(Error::shape(format!(
                "distractor embedding {m} is {}x{}, query is {}x{}",
                dist.height, dist.width, query.height, query.width
            )));
        }
    }
    let hw = query.cells();
    let cols = distractors.len() * hw;
    let data: Vec<f64> = (0..hw)
        .into_par_iter()
        .flat_map_iter(|i| {
            let q = query.row(i);
            distractors
                .iter()
                .flat_map(move |dist| (0..hw).map(move |j| dot_f64(q, dist.row(j))))
        })
        .collect();
    Matrix::from_vec(hw, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureGrid {
        let data = (0..h * w * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FeatureGrid::new(h, w, d, data).unwrap()
    }

    fn random_embedding(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> EmbeddingGrid {
        let data = (0..h * w * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        EmbeddingGrid::new(h, w, d, data).unwrap()
    }

    #[test]
    fn gap_of_constant_grid() {
        let grid = FeatureGrid::new(7, 7, 4, vec![1.0; 196]).unwrap();
        assert_eq!(gap(&grid), vec![1.0; 4]);
    }

    #[test]
    fn gap_two_cells() {
        let grid = FeatureGrid::new(2, 1, 1, vec![2.0, 4.0]).unwrap();
        assert_eq!(gap(&grid), vec![3.0]);
    }

    #[test]
    fn gap_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grid = random_grid(&mut rng, 4, 4, 8);
        let pooled = gap(&grid);
        for c in 0..8 {
            let mut s = 0.0f64;
            for cell in 0..16 {
                s += grid.data()[cell * 8 + c] as f64;
            }
            assert!((pooled[c] as f64 - s / 16.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gap_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_grid(&mut rng, 3, 5, 6);
        let b = random_grid(&mut rng, 3, 5, 6);
        let (alpha, beta) = (0.7f32, -1.3f32);
        let mixed: Vec<f32> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| alpha * x + beta * y)
            .collect();
        let mixed = FeatureGrid::new(3, 5, 6, mixed).unwrap();
        let (ga, gb, gm) = (gap(&a), gap(&b), gap(&mixed));
        for c in 0..6 {
            assert!((gm[c] - (alpha * ga[c] + beta * gb[c])).abs() < 1e-5);
        }
    }

    #[test]
    fn grid_rejects_bad_length_and_nan() {
        assert!(matches!(FeatureGrid::new(2, 2, 2, vec![0.0; 7]), Err(Error::Shape(_))));
        let mut data = vec![0.0; 8];
        data[3] = f32::NAN;
        assert!(matches!(FeatureGrid::new(2, 2, 2, data), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_examples() {
        let p = stable_softmax(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(p.values(), &[0.5, 0.5]);

        let p = stable_softmax(&[1.0, 0.0], 0.1).unwrap();
        let e10 = 10f64.exp();
        assert!((p.get(0) - e10 / (e10 + 1.0)).abs() < 1e-12);
        assert!((p.get(0) - 0.9999546).abs() < 1e-7);
        assert!((p.get(1) - 0.0000454).abs() < 1e-7);

        let p = stable_softmax(&[1000.0, 0.0], 1.0).unwrap();
        assert_eq!(p.values(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(matches!(stable_softmax(&[1.0], 0.0), Err(Error::Temperature(_))));
        assert!(matches!(stable_softmax(&[1.0], -2.0), Err(Error::Temperature(_))));
    }

    #[test]
    fn embedding_rows_are_renormalized() {
        let e = EmbeddingGrid::new(1, 2, 2, vec![3.0, 4.0, 0.0, 2.0]).unwrap();
        assert!((e.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((e.row(0)[1] - 0.8).abs() < 1e-7);
        assert_eq!(e.row(1), &[0.0, 1.0]);
        assert!(EmbeddingGrid::new(1, 1, 2, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn pairwise_dot_identical_rows() {
        let e = EmbeddingGrid::new(2, 2, 3, [1.0, 1.0, 1.0].repeat(4)).unwrap();
        let m = pairwise_dot(&e, std::slice::from_ref(&e)).unwrap();
        assert!(m.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn pairwise_dot_orthonormal_rows() {
        let mut data = vec![0.0; 9];
        for i in 0..3 {
            data[i * 3 + i] = 1.0;
        }
        let e = EmbeddingGrid::new(1, 3, 3, data).unwrap();
        let m = pairwise_dot(&e, std::slice::from_ref(&e)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn pairwise_dot_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_embedding(&mut rng, 3, 3, 16);
        let ds = vec![random_embedding(&mut rng, 3, 3, 16), random_embedding(&mut rng, 3, 3, 16)];
        let m = pairwise_dot(&q, &ds).unwrap();
        assert_eq!((m.rows(), m.cols()), (9, 18));
        for i in 0..9 {
            for img in 0..2 {
                for j in 0..9 {
                    let mut s = 0.0f64;
                    for c in 0..16 {
                        s += q.data()[i * 16 + c] as f64 * ds[img].data()[j * 16 + c] as f64;
                    }
                    assert!((m.get(i, img * 9 + j) - s).abs() < 1e-6);
                    assert!(m.get(i, img * 9 + j).abs() <= 1.0 + 1e-4);
                }
            }
        }
    }

    #[test]
    fn pairwise_dot_rejects_channel_mismatch() {
        let a = EmbeddingGrid::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let b = EmbeddingGrid::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(pairwise_dot(&a, &[b]), Err(Error::Shape(_))));
    }

    proptest::proptest! {
        #[test]
        fn softmax_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
            tau in 0.05f64..5.0,
        ) {
            let a = stable_softmax(&logits, tau).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let b = stable_softmax(&shifted, tau).unwrap();
            let sum: f64 = a.values().iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-6);
            for (x, y) in a.values().iter().zip(b.values()) {
                proptest::prop_assert!((x - y).abs() < 1e-6);
                proptest::prop_assert!((0.0..=1.0).contains(x));
            }
        }
    }
}
