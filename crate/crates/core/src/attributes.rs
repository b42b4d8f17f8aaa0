//! Attribute-level explanations of a single best edit.
//!
//! The target-class weight row of a GAP-linear head is decomposed greedily over
//! unit-normalised attribute classifier rows restricted to the parts detected
//! at the edited cells. Each attribute then gets an importance on the query and
//! on the counterfactual, and the ranking is by their difference.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{Candidate, DecisionHead, HeadKind};
use crate::numerics::{gap_f64, FeatureGrid};

pub const DEFAULT_DETECTED_PARTS: usize = 3;

/// Linear attribute classifiers over pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeBank {
    dim: usize,
    weights: Vec<f32>,
    biases: Vec<f32>,
    names: Vec<String>,
    parts: Vec<usize>,
}

impl AttributeBank {
    /// `weights` is `T x dim`; `parts[t]` is the part attribute `t` describes.
    pub fn new(dim: usize, weights: Vec<f32>, biases: Vec<f32>, names: Vec<String>, parts: Vec<usize>) -> Result<Self> {
        let t = names.len();
        if weights.len() != t * dim || biases.len() != t || parts.len() != t {
            return Err(Error::shape(format!(
                "attribute bank: {t} names, {} biases, {} part links, {} weights for dim {dim}",
                biases.len(),
                parts.len(),
                weights.len()
            )));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attribute bank".into()));
        }
        Ok(Self {
            dim,
            weights,
            biases,
            names,
            parts,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.weights[t * self.dim..(t + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn biases(&self) -> &[f32] {
        &self.biases
    }

    pub fn bias(&self, t: usize) -> f64 {
        f64::from(self.biases[t])
    }

    pub fn name(&self, t: usize) -> &str {
        &self.names[t]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn part(&self, t: usize) -> usize {
        self.parts[t]
    }

    pub fn parts(&self) -> &[usize] {
        &self.parts
    }

    /// Attributes attached to any of the given parts.
    pub fn attributes_of(&self, parts: &BTreeSet<usize>) -> BTreeSet<usize> {
        (0..self.len()).filter(|&t| parts.contains(&self.parts[t])).collect()
    }
}

/// `|C| x T` fraction of class images showing each attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAttributeMatrix {
    classes: usize,
    attributes: usize,
    entries: Vec<f64>,
}

impl ClassAttributeMatrix {
    pub fn new(classes: usize, attributes: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != classes * attributes {
            return Err(Error::shape(format!(
                "class-attribute matrix {classes}x{attributes} got {} values",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("class-attribute entries must lie in [0, 1]".into()));
        }
        Ok(Self {
            classes,
            attributes,
            entries,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn attributes(&self) -> usize {
        self.attributes
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.entries[class * self.attributes..(class + 1) * self.attributes]
    }

    pub fn get(&self, class: usize, attr: usize) -> f64 {
        self.entries[class * self.attributes + attr]
    }

    /// Attributes present in exactly one of the two classes (after denoising).
    pub fn symmetric_difference(&self, a: usize, b: usize) -> BTreeSet<usize> {
        (0..self.attributes)
            .filter(|&t| (self.get(a, t) > 0.5) != (self.get(b, t) > 0.5))
            .collect()
    }
}

/// Majority vote per class: an attribute is kept when strictly more than half
/// of the class shows it.
pub fn denoise_attributes(raw: &ClassAttributeMatrix) -> ClassAttributeMatrix {
    ClassAttributeMatrix {
        classes: raw.classes,
        attributes: raw.attributes,
        entries: raw.entries.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect(),
    }
}

/// Per-cell part probabilities from the external parts detector.
#[derive(Debug, Clone, PartialEq)]
pub struct PartProbGrid {
    height: usize,
    width: usize,
    parts: usize,
    probs: Vec<f32>,
}

impl PartProbGrid {
    pub fn new(height: usize, width: usize, parts: usize, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != height * width * parts || parts == 0 {
            return Err(Error::shape(format!(
                "part grid {height}x{width} with {parts} parts got {} values",
                probs.len()
            )));
        }
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("part probabilities".into()));
        }
        Ok(Self {
            height,
            width,
            parts,
            probs,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn cell(&self, cell: usize) -> &[f32] {
        &self.probs[cell * self.parts..(cell + 1) * self.parts]
    }
}

/// The `k` most probable parts at `cell`; ties go to the lower part id.
pub fn detect_parts_topk(grid: &PartProbGrid, cell: usize, k: usize) -> Result<Vec<usize>> {
    if cell >= grid.cells() {
        return Err(Error::OutOfRange(format!("cell {cell} of {}", grid.cells())));
    }
    if k > grid.parts {
        return Err(Error::OutOfRange(format!("top-{k} of {} parts", grid.parts)));
    }
    let probs = grid.cell(cell);
    let mut ids: Vec<usize> = (0..grid.parts).collect();
    ids.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    ids.truncate(k);
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// `(attribute, coefficient)` for every allowed attribute, by attribute id.
    pub coefficients: Vec<(usize, f64)>,
    pub residual_norm: f64,
    /// Residual norm before the first term and after each selected term.
    pub residual_history: Vec<f64>,
}

impl Decomposition {
    pub fn coefficient(&self, attr: usize) -> f64 {
        self.coefficients
            .iter()
            .find(|(t, _)| *t == attr)
            .map_or(0.0, |(_, a)| *a)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Greedy positive-projection decomposition of `class_weight` over the allowed
/// attribute rows.
pub fn ibd_decompose(
    class_weight: &[f64],
    bank: &AttributeBank,
    allowed: &BTreeSet<usize>,
    max_terms: usize,
) -> Result<Decomposition> {
    if allowed.is_empty() {
        return Err(Error::Invalid("no attributes allowed for decomposition".into()));
    }
    if max_terms > allowed.len() {
        return Err(Error::Invalid(format!(
            "max_terms {max_terms} exceeds {} allowed attributes",
            allowed.len()
        )));
    }
    if class_weight.len() != bank.dim {
        return Err(Error::shape(format!(
            "class weight has {} entries, attribute bank dim is {}",
            class_weight.len(),
            bank.dim
        )));
    }
    let mut units = Vec::with_capacity(allowed.len());
    for &t in allowed {
        if t >= bank.len() {
            return Err(Error::OutOfRange(format!("attribute {t} of {}", bank.len())));
        }
        let row: Vec<f64> = bank.row(t).iter().map(|&v| f64::from(v)).collect();
        let n = norm(&row);
        if n == 0.0 {
            return Err(Error::Invalid(format!("attribute `{}` has a zero weight row", bank.name(t))));
        }
        units.push((t, n, row.into_iter().map(|v| v / n).collect::<Vec<f64>>()));
    }

    let mut residual = class_weight.to_vec();
    let mut coeffs: Vec<(usize, f64)> = allowed.iter().map(|&t| (t, 0.0)).collect();
    let mut history = vec![norm(&residual)];
    for _ in 0..max_terms {
        let mut best: Option<(usize, f64)> = None;
        for (slot, (_, _, unit)) in units.iter().enumerate() {
            let proj: f64 = residual.iter().zip(unit).map(|(r, u)| r * u).sum();
            if proj > 0.0 && best.is_none_or(|(_, p)| proj > p) {
                best = Some((slot, proj));
            }
        }
        let Some((slot, proj)) = best else { break };
        let (_, row_norm, unit) = &units[slot];
        coeffs[slot].1 += proj / row_norm;
        for (r, u) in residual.iter_mut().zip(unit) {
            *r -= proj * u;
        }
        history.push(norm(&residual));
    }
    Ok(Decomposition {
        coefficients: coeffs,
        residual_norm: *history.last().expect("non-empty"),
        residual_history: history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeImportance {
    pub attribute: usize,
    pub name: String,
    pub part: usize,
    pub s: f64,
    pub s_prime: f64,
    pub delta: f64,
}

/// Ranks the attributes of the parts detected at an edit by how much more they
/// support the target class on the counterfactual than on the query.
#[allow(clippy::too_many_arguments)]
pub fn attribute_importance(
    query: &FeatureGrid,
    edited: &FeatureGrid,
    head: &DecisionHead,
    bank: &AttributeBank,
    target_class: usize,
    best_edit: Candidate,
    query_parts: &PartProbGrid,
    distractor_parts: &PartProbGrid,
) -> Result<Vec<AttributeImportance>> {
    if head.kind() != HeadKind::GapLinear {
        return Err(Error::Invalid("attribute explanations need a gap_linear head".into()));
    }
    if target_class >= head.num_classes() {
        return Err(Error::OutOfRange(format!("target class {target_class}")));
    }
    if !query.same_shape(edited) {
        return Err(Error::shape("edited grid shape differs from query"));
    }
    if bank.dim != query.channels() {
        return Err(Error::shape(format!(
            "attribute bank dim {} vs {} feature channels",
            bank.dim,
            query.channels()
        )));
    }
    if best_edit.query_cell >= query.cells() {
        return Err(Error::OutOfRange(format!("edit cell {}", best_edit.query_cell)));
    }
    for cell in 0..query.cells() {
        if cell != best_edit.query_cell && query.row(cell) != edited.row(cell) {
            return Err(Error::Invalid(format!(
                "edited grid differs from the query at cell {cell}, outside the best edit"
            )));
        }
    }

    let mut parts: BTreeSet<usize> = BTreeSet::new();
    let k = DEFAULT_DETECTED_PARTS.min(query_parts.parts());
    parts.extend(detect_parts_topk(query_parts, best_edit.query_cell, k)?);
    let k = DEFAULT_DETECTED_PARTS.min(distractor_parts.parts());
    parts.extend(detect_parts_topk(distractor_parts, best_edit.distractor_cell, k)?);
    let allowed = bank.attributes_of(&parts);
    if allowed.is_empty() {
        return Err(Error::Invalid(format!("no attributes attached to detected parts {parts:?}")));
    }

    let weight_row: Vec<f64> = head.layers()[0]
        .weight_row(target_class)
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let decomposition = ibd_decompose(&weight_row, bank, &allowed, allowed.len())?;

    let pooled_query = gap_f64(query);
    let pooled_edited = gap_f64(edited);
    let response = |t: usize, pooled: &[f64]| -> f64 {
        bank.bias(t) + bank.row(t).iter().zip(pooled).map(|(&w, &z)| f64::from(w) * z).sum::<f64>()
    };
    let mut ranked: Vec<AttributeImportance> = decomposition
        .coefficients
        .iter()
        .map(|&(t, alpha)| {
            let s = alpha * response(t, &pooled_query);
            let s_prime = alpha * response(t, &pooled_edited);
            AttributeImportance {
                attribute: t,
                name: bank.name(t).to_string(),
                part: bank.part(t),
                s,
                s_prime,
                delta: s_prime - s,
            }
        })
        .collect();
    ranked.sort_by(|a, b| b.delta.total_cmp(&a.delta).then(a.attribute.cmp(&b.attribute)));
    Ok(ranked)
}

/// One explained case: its top-ranked attribute and the class pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankedCase {
    pub top_attribute: usize,
    pub query_class: usize,
    pub target_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativeAccuracy {
    pub accuracy: Option<f64>,
    pub hits: usize,
    pub evaluated: usize,
    pub skipped: usize,
}

/// How often the top attribute lies in the symmetric difference of the two
/// classes' denoised attribute rows. Pairs with an empty difference are skipped.
pub fn top1_discriminative_accuracy(cases: &[RankedCase], denoised: &ClassAttributeMatrix) -> Result<DiscriminativeAccuracy> {
    let mut out = DiscriminativeAccuracy {
        accuracy: None,
        hits: 0,
        evaluated: 0,
        skipped: 0,
    };
    for case in cases {
        if case.query_class >= denoised.classes || case.target_class >= denoised.classes {
            return Err(Error::OutOfRange(format!("class pair {:?}", (case.query_class, case.target_class))));
        }
        let truth = denoised.symmetric_difference(case.query_class, case.target_class);
        if truth.is_empty() {
            out.skipped += 1;
            continue;
        }
        out.evaluated += 1;
        if truth.contains(&case.top_attribute) {
            out.hits += 1;
        }
    }
    if out.evaluated > 0 {
        out.accuracy = Some(out.hits as f64 / out.evaluated as f64);
    }
    Ok(out)
}
