//! The decision network `g` and single-cell edits of its input.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gap_f64, softmax_unchecked, FeatureGrid, ProbVector};

/// Architecture of the decision head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Global average pooling followed by one linear layer.
    GapLinear,
    /// Linear layers over the flattened `hw * d` grid with ReLU between them.
    FlattenMlp,
}

/// One affine layer, `y = W x + b`, with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    out_dim: usize,
    in_dim: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Layer {
    pub fn new(out_dim: usize, in_dim: usize, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weight.len() != out_dim * in_dim {
            return Err(Error::shape(format!(
                "layer weight expects {out_dim}x{in_dim} values, got {}",
                weight.len()
            )));
        }
        if bias.len() != out_dim {
            return Err(Error::shape(format!(
                "layer bias expects {out_dim} values, got {}",
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("head layer".into()));
        }
        Ok(Self {
            out_dim,
            in_dim,
            weight,
            bias,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn weight_row(&self, r: usize) -> &[f32] {
        &self.weight[r * self.in_dim..(r + 1) * self.in_dim]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|r| {
                let w = self.weight_row(r);
                f64::from(self.bias[r])
                    + w.iter().zip(x).map(|(&a, &b)| f64::from(a) * b).sum::<f64>()
            })
            .collect()
    }
}

/// Decision head `g: R^{hw x d} -> R^{|C|}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionHead {
    kind: HeadKind,
    layers: Vec<Layer>,
    class_names: Vec<String>,
}

impl DecisionHead {
    pub fn new(kind: HeadKind, layers: Vec<Layer>, class_names: Vec<String>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::shape("decision head has no layers"));
        };
        if kind == HeadKind::GapLinear && layers.len() != 1 {
            return Err(Error::shape(format!(
                "gap_linear head takes exactly one layer, got {}",
                layers.len()
            )));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::shape(format!(
                    "layer output {} does not feed next layer input {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        if last.out_dim != class_names.len() {
            return Err(Error::shape(format!(
                "head emits {} logits for {} classes",
                last.out_dim,
                class_names.len()
            )));
        }
        Ok(Self {
            kind,
            layers,
            class_names,
        })
    }

    /// Convenience constructor for a GAP + linear head; `weight` is `|C| x d`.
    pub fn gap_linear(weight: Vec<f32>, bias: Vec<f32>, class_names: Vec<String>) -> Result<Self> {
        let classes = class_names.len();
        if classes == 0 {
            return Err(Error::shape("head needs at least one class"));
        }
        let d = weight.len() / classes;
        let layer = Layer::new(classes, d, weight, bias)?;
        Self::new(HeadKind::GapLinear, vec![layer], class_names)
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    fn check_grid(&self, grid: &FeatureGrid) -> Result<()> {
        let expected = match self.kind {
            HeadKind::GapLinear => grid.channels(),
            HeadKind::FlattenMlp => grid.cells() * grid.channels(),
        };
        if expected != self.input_dim() {
            return Err(Error::shape(format!(
                "{:?} head expects input dim {}, grid {}x{}x{} provides {expected}",
                self.kind,
                self.input_dim(),
                grid.height(),
                grid.width(),
                grid.channels()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, grid: &FeatureGrid) -> Result<Vec<f64>> {
        self.check_grid(grid)?;
        Ok(self.logits_unchecked(grid))
    }

    fn logits_unchecked(&self, grid: &FeatureGrid) -> Vec<f64> {
        match self.kind {
            HeadKind::GapLinear => self.layers[0].apply(&gap_f64(grid)),
            HeadKind::FlattenMlp => {
                let x: Vec<f64> = grid.data().iter().map(|&v| f64::from(v)).collect();
                let first = self.layers[0].apply(&x);
                self.finish_mlp(first)
            }
        }
    }

    /// Runs layers `1..` given the first layer's pre-activation.
    fn finish_mlp(&self, mut act: Vec<f64>) -> Vec<f64> {
        for layer in &self.layers[1..] {
            act.iter_mut().for_each(|v| *v = v.max(0.0));
            act = layer.apply(&act);
        }
        act
    }
}

/// One single-cell replacement: query cell `query_cell` takes row `distractor_cell`
/// of distractor `distractor_image`.
///
/// The derived ordering is lexicographic over `(query_cell, distractor_image,
/// distractor_cell)` and serves as the tie-break everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub query_cell: usize,
    pub distractor_image: usize,
    pub distractor_cell: usize,
}

impl Candidate {
    pub fn new(query_cell: usize, distractor_image: usize, distractor_cell: usize) -> Self {
        Self {
            query_cell,
            distractor_image,
            distractor_cell,
        }
    }

    /// Flat column index into a similarity table with `hw` cells per image.
    pub fn column(&self, hw: usize) -> usize {
        self.distractor_image * hw + self.distractor_cell
    }
}

pub fn head_forward(head: &DecisionHead, grid: &FeatureGrid) -> Result<ProbVector> {
    let logits = head.logits(grid)?;
    crate::numerics::stable_softmax(&logits, 1.0)
}

pub(crate) fn check_distractors(base: &FeatureGrid, distractors: &[FeatureGrid]) -> Result<()> {
    for (m, d) in distractors.iter().enumerate() {
        if !base.same_shape(d) {
            return Err(Error::shape(format!(
                "distractor {m} is {}x{}x{}, query is {}x{}x{}",
                d.height(),
                d.width(),
                d.channels(),
                base.height(),
                base.width(),
                base.channels()
            )));
        }
    }
    Ok(())
}

fn check_candidate(cand: &Candidate, hw: usize, n: usize) -> Result<()> {
    if cand.query_cell >= hw || cand.distractor_cell >= hw || cand.distractor_image >= n {
        return Err(Error::OutOfRange(format!(
            "candidate {cand:?} outside {hw} cells x {n} distractors"
        )));
    }
    Ok(())
}

/// Copy of `base` with one cell replaced from a distractor grid.
pub fn apply_edit(base: &FeatureGrid, distractors: &[FeatureGrid], cand: Candidate) -> Result<FeatureGrid> {
    check_distractors(base, distractors)?;
    check_candidate(&cand, base.cells(), distractors.len())?;
    let mut out = base.clone();
    out.row_mut(cand.query_cell)
        .copy_from_slice(distractors[cand.distractor_image].row(cand.distractor_cell));
    Ok(out)
}

/// Applies several edits in order. An empty list returns an exact copy of `base`.
pub fn apply_edits(base: &FeatureGrid, distractors: &[FeatureGrid], cands: &[Candidate]) -> Result<FeatureGrid> {
    check_distractors(base, distractors)?;
    let mut out = base.clone();
    for cand in cands {
        check_candidate(cand, base.cells(), distractors.len())?;
        out.row_mut(cand.query_cell)
            .copy_from_slice(distractors[cand.distractor_image].row(cand.distractor_cell));
    }
    Ok(out)
}

/// `g_target` for every candidate edit of `base`, in input order.
///
/// Both head kinds update the first affine layer incrementally from the
/// changed cell, so a candidate costs `O(out * d)` for that layer instead of a
/// full pass over the grid.
pub fn score_candidates(
    head: &DecisionHead,
    base: &FeatureGrid,
    distractors: &[FeatureGrid],
    cands: &[Candidate],
    target_class: usize,
) -> Result<Vec<f64>> {
    if target_class >= head.num_classes() {
        return Err(Error::OutOfRange(format!(
            "target class {target_class} with {} classes",
            head.num_classes()
        )));
    }
    if cands.is_empty() {
        return Ok(Vec::new());
    }
    head.check_grid(base)?;
    check_distractors(base, distractors)?;
    for c in cands {
        check_candidate(c, base.cells(), distractors.len())?;
    }
    let scorer = IncrementalScorer::new(head, base);
    Ok(cands
        .par_iter()
        .map(|c| scorer.prob(distractors, *c, target_class))
        .collect())
}

/// Cached first-layer activation of a working grid.
struct IncrementalScorer<'a> {
    head: &'a DecisionHead,
    base: &'a FeatureGrid,
    first: Vec<f64>,
}

impl<'a> IncrementalScorer<'a> {
    fn new(head: &'a DecisionHead, base: &'a FeatureGrid) -> Self {
        let first = match head.kind {
            HeadKind::GapLinear => head.layers[0].apply(&gap_f64(base)),
            HeadKind::FlattenMlp => {
                let x: Vec<f64> = base.data().iter().map(|&v| f64::from(v)).collect();
                head.layers[0].apply(&x)
            }
        };
        Self { head, base, first }
    }

    fn prob(&self, distractors: &[FeatureGrid], cand: Candidate, target: usize) -> f64 {
        let old = self.base.row(cand.query_cell);
        let new = distractors[cand.distractor_image].row(cand.distractor_cell);
        let d = self.base.channels();
        let layer = &self.head.layers[0];
        let (offset, scale) = match self.head.kind {
            HeadKind::GapLinear => (0, 1.0 / self.base.cells() as f64),
            HeadKind::FlattenMlp => (cand.query_cell * d, 1.0),
        };
        let delta: Vec<f64> = new
            .iter()
            .zip(old)
            .map(|(&n, &o)| (f64::from(n) - f64::from(o)) * scale)
            .collect();
        let updated: Vec<f64> = self
            .first
            .iter()
            .enumerate()
            .map(|(r, &a)| {
                let w = &layer.weight_row(r)[offset..offset + d];
                a + w.iter().zip(&delta).map(|(&wv, &dv)| f64::from(wv) * dv).sum::<f64>()
            })
            .collect();
        let logits = match self.head.kind {
            HeadKind::GapLinear => updated,
            HeadKind::FlattenMlp => self.head.finish_mlp(updated),
        };
        softmax_unchecked(&logits, 1.0)[target]
    }
}
