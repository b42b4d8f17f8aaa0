//! Greedy counterfactual search.
//!
//! Each iteration commits the single edit maximising
//! `log g_target(edited) + lambda * log L_s(pair)` over the surviving
//! candidates, and the loop stops as soon as the head's argmax reaches the
//! target class.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{apply_edit, check_distractors, head_forward, score_candidates, Candidate, DecisionHead};
use crate::numerics::{dot_f64, EmbeddingGrid, FeatureGrid, ProbVector};
use crate::semantic::{
    cluster_images, hard_constraint_candidates, prefilter_topk, similarity_table, ClusterAssignment, Normalization,
    SimilarityTable, DEFAULT_K_FRACTION, DEFAULT_TEMPERATURE,
};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-30;
pub const DEFAULT_LAMBDA: f64 = 0.4;
pub const DEFAULT_HARD_CLUSTERS: usize = 50;

/// How the semantic side restricts and weights candidates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// Top-k% likelihood prefilter plus the weighted semantic term.
    #[default]
    Soft,
    /// Only same-cluster pairs; the semantic term is dropped.
    Hard,
    /// Every pair is scored; the semantic term still applies with weight `lambda`.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub k_fraction: f64,
    /// `None` means one edit per cell, `hw`.
    pub max_edits: Option<usize>,
    pub constraint_mode: ConstraintMode,
    pub normalization: Normalization,
    pub reuse_cells: bool,
    /// Cluster count for hard mode when the case carries no assignment.
    pub hard_clusters: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            temperature: DEFAULT_TEMPERATURE,
            k_fraction: DEFAULT_K_FRACTION,
            max_edits: None,
            constraint_mode: ConstraintMode::Soft,
            normalization: Normalization::Pooled,
            reuse_cells: false,
            hard_clusters: DEFAULT_HARD_CLUSTERS,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Invalid(format!("lambda must be a finite value >= 0, got {}", self.lambda)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Temperature(self.temperature));
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(Error::KFraction(self.k_fraction));
        }
        if self.max_edits == Some(0) {
            return Err(Error::Invalid("max_edits must be at least 1".into()));
        }
        Ok(())
    }

    fn effective_lambda(&self) -> f64 {
        match self.constraint_mode {
            ConstraintMode::Hard => 0.0,
            _ => self.lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub candidate: Candidate,
    pub class_prob_after: f64,
    pub semantic_likelihood: f64,
    pub combined_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    /// Every evaluation of `g`, including the unedited grid and the check after each commit.
    pub head_evaluations: u64,
    /// Embedding dot products spent on the similarity table.
    pub dot_products: u64,
    /// Candidates left after prefiltering or clustering, before blocking.
    pub candidate_pool: u64,
    /// Candidates scored by `g` in each iteration.
    pub candidates_per_edit: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTrace {
    pub query_id: String,
    pub query_class: usize,
    pub target_class: usize,
    pub distractor_ids: Vec<String>,
    pub edits: Vec<Edit>,
    pub success: bool,
    pub final_probs: ProbVector,
    pub stats: SearchStats,
}

/// Everything one search needs besides the head.
#[derive(Debug, Clone)]
pub struct SearchCase {
    pub query_id: String,
    pub query: FeatureGrid,
    pub query_embedding: EmbeddingGrid,
    pub distractor_ids: Vec<String>,
    pub distractors: Vec<FeatureGrid>,
    pub distractor_embeddings: Vec<EmbeddingGrid>,
    pub target_class: usize,
    /// Cluster labels for hard mode; computed on demand when absent.
    pub clusters: Option<ClusterAssignment>,
}

impl SearchCase {
    fn validate(&self) -> Result<()> {
        if self.distractors.is_empty() {
            return Err(Error::Invalid("search needs at least one distractor".into()));
        }
        if self.distractors.len() != self.distractor_embeddings.len() || self.distractors.len() != self.distractor_ids.len() {
            return Err(Error::shape(format!(
                "{} distractor ids, {} feature grids, {} embeddings",
                self.distractor_ids.len(),
                self.distractors.len(),
                self.distractor_embeddings.len()
            )));
        }
        check_distractors(&self.query, &self.distractors)?;
        let (h, w) = (self.query.height(), self.query.width());
        for e in std::iter::once(&self.query_embedding).chain(&self.distractor_embeddings) {
            if e.height() != h || e.width() != w {
                return Err(Error::shape(format!(
                    "embedding grid {}x{} does not match feature grid {h}x{w}",
                    e.height(),
                    e.width()
                )));
            }
        }
        Ok(())
    }
}

#[inline]
pub fn combined_score(class_prob: f64, likelihood: f64, lambda: f64) -> f64 {
    class_prob.max(PROB_FLOOR).ln() + lambda * likelihood.max(PROB_FLOOR).ln()
}

/// Best edit among `pool` after removing blocked query cells.
///
/// Returns the edit and the number of candidates scored by the head.
#[allow(clippy::too_many_arguments)]
pub fn best_edit_among(
    head: &DecisionHead,
    query: &FeatureGrid,
    distractors: &[FeatureGrid],
    table: &SimilarityTable,
    pool: &[Candidate],
    lambda: f64,
    target_class: usize,
    blocked: &BTreeSet<usize>,
) -> Result<(Edit, usize)> {
    let surviving: Vec<Candidate> = pool
        .iter()
        .copied()
        .filter(|c| !blocked.contains(&c.query_cell))
        .collect();
    if surviving.is_empty() {
        return Err(Error::NoCandidates);
    }
    let probs = score_candidates(head, query, distractors, &surviving, target_class)?;
    let mut best: Option<Edit> = None;
    for (cand, prob) in surviving.iter().zip(probs) {
        let likelihood = table.get(*cand);
        let score = combined_score(prob, likelihood, lambda);
        if best.as_ref().is_none_or(|b| score > b.combined_score || (score == b.combined_score && *cand < b.candidate)) {
            best = Some(Edit {
                candidate: *cand,
                class_prob_after: prob,
                semantic_likelihood: likelihood,
                combined_score: score,
            });
        }
    }
    Ok((best.expect("non-empty"), surviving.len()))
}

/// Single best edit under the combined objective for soft and unconstrained modes.
///
/// Hard mode needs cluster labels; use [`best_edit_among`] with the output of
/// [`hard_constraint_candidates`] instead.
pub fn single_best_edit(
    head: &DecisionHead,
    query: &FeatureGrid,
    distractors: &[FeatureGrid],
    table: &SimilarityTable,
    config: &SearchConfig,
    target_class: usize,
    blocked: &BTreeSet<usize>,
) -> Result<Edit> {
    config.validate()?;
    let pool = match config.constraint_mode {
        ConstraintMode::Soft => prefilter_topk(table, config.k_fraction)?,
        ConstraintMode::None => prefilter_topk(table, 1.0)?,
        ConstraintMode::Hard => {
            return Err(Error::Invalid("hard mode requires a cluster assignment".into()));
        }
    };
    best_edit_among(head, query, distractors, table, &pool, config.effective_lambda(), target_class, blocked)
        .map(|(edit, _)| edit)
}

pub fn find_counterfactual(head: &DecisionHead, case: &SearchCase, config: &SearchConfig) -> Result<EditTrace> {
    config.validate()?;
    case.validate()?;
    let target = case.target_class;
    if target >= head.num_classes() {
        return Err(Error::OutOfRange(format!(
            "target class {target} with {} classes",
            head.num_classes()
        )));
    }

    let mut stats = SearchStats::default();
    let base_probs = head_forward(head, &case.query)?;
    stats.head_evaluations += 1;
    let query_class = base_probs.argmax();
    let mut trace = EditTrace {
        query_id: case.query_id.clone(),
        query_class,
        target_class: target,
        distractor_ids: case.distractor_ids.clone(),
        edits: Vec::new(),
        success: query_class == target,
        final_probs: base_probs,
        stats,
    };
    if trace.success {
        return Ok(trace);
    }

    let table = similarity_table(
        &case.query_embedding,
        &case.distractor_embeddings,
        config.temperature,
        config.normalization,
    )?;
    trace.stats.dot_products = table.pair_count() as u64;

    let pool = match config.constraint_mode {
        ConstraintMode::Soft => prefilter_topk(&table, config.k_fraction)?,
        ConstraintMode::None => prefilter_topk(&table, 1.0)?,
        ConstraintMode::Hard => {
            let ids: Vec<&str> = case.distractor_ids.iter().map(String::as_str).collect();
            match &case.clusters {
                Some(a) => hard_constraint_candidates(a, &case.query_id, &ids)?,
                None => {
                    let a = cluster_case(case, config)?;
                    hard_constraint_candidates(&a, &case.query_id, &ids)?
                }
            }
        }
    };
    trace.stats.candidate_pool = pool.len() as u64;

    let hw = case.query.cells();
    let max_edits = config.max_edits.unwrap_or(hw);
    let lambda = config.effective_lambda();
    let mut working = case.query.clone();
    let mut blocked = BTreeSet::new();
    while trace.edits.len() < max_edits {
        let (edit, scored) =
            match best_edit_among(head, &working, &case.distractors, &table, &pool, lambda, target, &blocked) {
                Ok(found) => found,
                Err(Error::NoCandidates) => break,
                Err(e) => return Err(e),
            };
        trace.stats.candidates_per_edit.push(scored as u64);
        trace.stats.head_evaluations += scored as u64;

        working = apply_edit(&working, &case.distractors, edit.candidate)?;
        if !config.reuse_cells {
            blocked.insert(edit.candidate.query_cell);
        }
        trace.edits.push(edit);
        trace.final_probs = head_forward(head, &working)?;
        trace.stats.head_evaluations += 1;
        if trace.final_probs.argmax() == target {
            trace.success = true;
            break;
        }
    }
    Ok(trace)
}

/// Joint clustering of the query and distractor embedding cells for hard mode.
fn cluster_case(case: &SearchCase, config: &SearchConfig) -> Result<ClusterAssignment> {
    let mut images: Vec<(&str, &EmbeddingGrid)> = vec![(case.query_id.as_str(), &case.query_embedding)];
    images.extend(
        case.distractor_ids
            .iter()
            .map(String::as_str)
            .zip(&case.distractor_embeddings),
    );
    let cells: usize = images.iter().map(|(_, e)| e.cells()).sum();
    cluster_images(&images, config.hard_clusters.min(cells).max(1), config.seed)
}

/// Exhaustive reference for [`single_best_edit`]: every pair, naive edit plus
/// full head evaluation, likelihoods computed directly from the embeddings.
///
/// Ignores `k_fraction` and `constraint_mode`; uses `config.lambda`,
/// `config.temperature` and `config.normalization`.
#[allow(clippy::too_many_arguments)]
pub fn oracle_best_edit(
    head: &DecisionHead,
    query: &FeatureGrid,
    distractors: &[FeatureGrid],
    query_embedding: &EmbeddingGrid,
    distractor_embeddings: &[EmbeddingGrid],
    config: &SearchConfig,
    target_class: usize,
    blocked: &BTreeSet<usize>,
) -> Result<Edit> {
    check_distractors(query, distractors)?;
    if distractors.len() != distractor_embeddings.len() {
        return Err(Error::shape("distractor features and embeddings differ in count"));
    }
    let hw = query.cells();
    let n = distractors.len();
    let mut best: Option<Edit> = None;
    for i in 0..hw {
        if blocked.contains(&i) {
            continue;
        }
        let likelihoods = direct_likelihoods(query_embedding, distractor_embeddings, i, config)?;
        for m in 0..n {
            for j in 0..hw {
                let cand = Candidate::new(i, m, j);
                let edited = apply_edit(query, distractors, cand)?;
                let prob = head_forward(head, &edited)?.get(target_class);
                let likelihood = likelihoods[m * hw + j];
                let score = combined_score(prob, likelihood, config.lambda);
                if best.as_ref().is_none_or(|b| score > b.combined_score) {
                    best = Some(Edit {
                        candidate: cand,
                        class_prob_after: prob,
                        semantic_likelihood: likelihood,
                        combined_score: score,
                    });
                }
            }
        }
    }
    best.ok_or(Error::NoCandidates)
}

fn direct_likelihoods(
    query: &EmbeddingGrid,
    distractors: &[EmbeddingGrid],
    cell: usize,
    config: &SearchConfig,
) -> Result<Vec<f64>> {
    let q = query.row(cell);
    let mut dots = Vec::new();
    for d in distractors {
        if d.channels() != query.channels() || d.cells() != query.cells() {
            return Err(Error::shape("embedding shapes differ"));
        }
        for j in 0..d.cells() {
            dots.push(dot_f64(q, d.row(j)));
        }
    }
    let scope = match config.normalization {
        Normalization::Pooled => dots.len(),
        Normalization::PerImage => query.cells(),
    };
    let mut out = Vec::with_capacity(dots.len());
    for block in dots.chunks(scope) {
        let max = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = block.iter().map(|&x| ((x - max) / config.temperature).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    Ok(out)
}
