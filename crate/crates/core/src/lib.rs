//! Counterfactual visual explanations by swapping feature-map cells between
//! a query image and distractor images of a target class, guided by
//! semantic consistency between cell embeddings.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attributes;
pub mod bundle;
pub mod cli;
pub mod document;
pub mod error;
pub mod head;
pub mod metrics;
pub mod numerics;
pub mod search;
pub mod semantic;
pub mod synthetic;

pub use bundle::{load_bundle, write_bundle, Bundle, BundleImage};
pub use document::{load_trace, save_trace, TraceDocument};
pub use error::{Error, Result};
pub use head::{apply_edit, apply_edits, head_forward, score_candidates, Candidate, DecisionHead, HeadKind, Layer};
pub use numerics::{gap, pairwise_dot, stable_softmax, EmbeddingGrid, FeatureGrid, Matrix, ProbVector};
pub use search::{
    find_counterfactual, oracle_best_edit, single_best_edit, ConstraintMode, Edit, EditTrace, SearchCase, SearchConfig,
    SearchStats,
};
pub use semantic::{
    cluster_images, kmeans_cells, prefilter_topk, similarity_table, ClusterAssignment, Normalization, SimilarityTable,
};
