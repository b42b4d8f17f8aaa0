//! Fixtures and reference loops shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use counterfact::metrics::{Keypoint, KeypointSet};
use counterfact::search::SearchStats;
use counterfact::{
    apply_edit, head_forward, oracle_best_edit, score_candidates, stable_softmax, Bundle, BundleImage, Candidate,
    DecisionHead, Edit, EditTrace, EmbeddingGrid, FeatureGrid, SearchCase, SearchConfig, TraceDocument,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn updating_golden() -> bool {
    std::env::var_os("UPDATE_GOLDEN").is_some()
}

/// Every file under `root`, relative, sorted.
pub fn tree(root: &Path) -> Vec<PathBuf> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

pub fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureGrid {
    FeatureGrid::new(h, w, d, (0..h * w * d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn random_embedding(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> EmbeddingGrid {
    EmbeddingGrid::new(h, w, d, (0..h * w * d).map(|_| rng.random_range(0.05f32..1.0)).collect()).unwrap()
}

/// Random gap-linear head and case whose query is not already the target.
pub fn random_case(seed: u64, h: usize, w: usize, d: usize, classes: usize, n: usize) -> (DecisionHead, SearchCase) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = (0..classes).map(|c| format!("c{c}")).collect();
    let weight = (0..classes * d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let bias = (0..classes).map(|_| rng.random_range(-0.2f32..0.2)).collect();
    let head = DecisionHead::gap_linear(weight, bias, names).unwrap();
    let query = random_grid(&mut rng, h, w, d);
    let base = head_forward(&head, &query).unwrap().argmax();
    let target = (base + 1 + rng.random_range(0..classes - 1)) % classes;
    let case = SearchCase {
        query_id: "query".into(),
        query,
        query_embedding: random_embedding(&mut rng, h, w, 6),
        distractor_ids: (0..n).map(|m| format!("d{m}")).collect(),
        distractors: (0..n).map(|_| random_grid(&mut rng, h, w, d)).collect(),
        distractor_embeddings: (0..n).map(|_| random_embedding(&mut rng, h, w, 6)).collect(),
        target_class: target,
        clusters: None,
    };
    (head, case)
}

/// Greedy loop driven by the exhaustive oracle.
pub fn oracle_trace(head: &DecisionHead, case: &SearchCase, config: &SearchConfig) -> (Vec<Edit>, bool) {
    let mut working = case.query.clone();
    let mut blocked = BTreeSet::new();
    let mut edits = Vec::new();
    if head_forward(head, &working).unwrap().argmax() == case.target_class {
        return (edits, true);
    }
    while edits.len() < config.max_edits.unwrap_or(working.cells()) && blocked.len() < working.cells() {
        let edit = oracle_best_edit(
            head,
            &working,
            &case.distractors,
            &case.query_embedding,
            &case.distractor_embeddings,
            config,
            case.target_class,
            &blocked,
        )
        .unwrap();
        working = apply_edit(&working, &case.distractors, edit.candidate).unwrap();
        blocked.insert(edit.candidate.query_cell);
        edits.push(edit);
        if head_forward(head, &working).unwrap().argmax() == case.target_class {
            return (edits, true);
        }
    }
    (edits, false)
}

/// Classification-only greedy: argmax of the target probability, first wins.
pub fn classification_greedy(head: &DecisionHead, case: &SearchCase) -> (Vec<Candidate>, bool) {
    let hw = case.query.cells();
    let mut working = case.query.clone();
    let mut blocked = BTreeSet::new();
    let mut picked = Vec::new();
    if head_forward(head, &working).unwrap().argmax() == case.target_class {
        return (picked, true);
    }
    while picked.len() < hw {
        let cands: Vec<Candidate> = (0..hw)
            .filter(|i| !blocked.contains(i))
            .flat_map(|i| (0..case.distractors.len()).flat_map(move |m| (0..hw).map(move |j| Candidate::new(i, m, j))))
            .collect();
        let probs = score_candidates(head, &working, &case.distractors, &cands, case.target_class).unwrap();
        let mut best = 0;
        for (k, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = k;
            }
        }
        let c = cands[best];
        working = apply_edit(&working, &case.distractors, c).unwrap();
        blocked.insert(c.query_cell);
        picked.push(c);
        if head_forward(head, &working).unwrap().argmax() == case.target_class {
            return (picked, true);
        }
    }
    (picked, false)
}

fn one_hot(d: usize, i: usize) -> Vec<f32> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn kps(id: &str, size: u32, points: &[(usize, f64, f64, bool)]) -> KeypointSet {
    KeypointSet {
        image_id: id.into(),
        image_width: size,
        image_height: size,
        points: points
            .iter()
            .map(|&(part, x, y, visible)| Keypoint { part, x, y, visible })
            .collect(),
    }
}

/// 2x2 grid, two classes, one query and one distractor. The query's head and
/// wing cells match the distractor's head and wing cells semantically. With
/// `shortcut`, distractor cell 3 carries strong target evidence but an
/// embedding unlike any query cell.
pub fn planted_bundle(shortcut: bool) -> Bundle {
    let head = DecisionHead::gap_linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], vec!["tern".into(), "gull".into()])
        .unwrap();
    let (e_head, e_wing, e_bg, e_odd) = (one_hot(4, 0), one_hot(4, 1), one_hot(4, 2), one_hot(4, 3));
    let q_feat = FeatureGrid::new(2, 2, 2, vec![2.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let last = if shortcut { 3.0 } else { 0.0 };
    let d_feat = FeatureGrid::new(2, 2, 2, vec![0.0, 2.0, 0.0, 2.0, 0.0, 0.0, 0.0, last]).unwrap();
    let q_emb = [e_head.clone(), e_wing.clone(), e_bg.clone(), e_bg.clone()].concat();
    let d_emb = [e_head, e_wing, e_bg.clone(), if shortcut { e_odd } else { e_bg }].concat();
    let points = [(0, 16.0, 16.0, true), (1, 48.0, 16.0, true)];
    let mut q = BundleImage::new("query", 0, q_feat, FeatureGrid::new(2, 2, 4, q_emb).unwrap()).unwrap();
    q.keypoints = Some(kps("query", 64, &points));
    let mut d = BundleImage::new("distractor", 1, d_feat, FeatureGrid::new(2, 2, 4, d_emb).unwrap()).unwrap();
    d.keypoints = Some(kps("distractor", 64, &points));
    Bundle {
        height: 2,
        width: 2,
        channels: 2,
        embedding_channels: 4,
        class_names: vec!["tern".into(), "gull".into()],
        part_names: vec!["head".into(), "wing".into()],
        part_aliases: BTreeMap::new(),
        images: vec![q, d],
        head,
        attributes: None,
        class_attributes: None,
        confusion: None,
        warnings: vec![],
    }
}

/// One-image bundle with a gap-linear head.
pub fn minimal_bundle() -> Bundle {
    let head = DecisionHead::gap_linear(vec![1.0, -0.5, -0.25, 1.0], vec![0.0, 0.125], vec!["a".into(), "b".into()])
        .unwrap();
    let img = BundleImage::new(
        "only",
        0,
        FeatureGrid::new(2, 2, 2, vec![1.0, 0.5, -0.25, 0.75, 0.0, 1.5, 2.0, -1.0]).unwrap(),
        FeatureGrid::new(2, 2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.5]).unwrap(),
    )
    .unwrap();
    Bundle {
        height: 2,
        width: 2,
        channels: 2,
        embedding_channels: 3,
        class_names: vec!["a".into(), "b".into()],
        part_names: vec![],
        part_aliases: BTreeMap::new(),
        images: vec![img],
        head,
        attributes: None,
        class_attributes: None,
        confusion: None,
        warnings: vec![],
    }
}

/// Five annotated images on a 2x2 grid over 64x64 pixels. Cell centres sit at
/// (16,16), (48,16), (16,48), (48,48).
pub fn golden_bundle() -> Bundle {
    let head = DecisionHead::gap_linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], vec!["a".into(), "b".into()]).unwrap();
    let at = |cell: usize| ((cell % 2) as f64 * 32.0 + 16.0, (cell / 2) as f64 * 32.0 + 16.0);
    let spec: [(&str, &[(usize, usize, bool)], [bool; 4]); 5] = [
        ("A", &[(0, 0, true), (1, 1, true)], [true, true, false, false]),
        ("B", &[(0, 0, true), (2, 3, true)], [true, false, false, true]),
        ("C", &[(1, 1, true), (3, 2, true)], [false, true, true, false]),
        ("D", &[(0, 0, false)], [false; 4]),
        ("E", &[(0, 0, true), (1, 0, true), (3, 3, true)], [true; 4]),
    ];
    let images = spec
        .iter()
        .enumerate()
        .map(|(i, (id, points, mask))| {
            let mut img = BundleImage::new(
                *id,
                i % 2,
                FeatureGrid::zeros(2, 2, 2),
                FeatureGrid::new(2, 2, 2, [1.0, 0.0].repeat(4)).unwrap(),
            )
            .unwrap();
            let pts: Vec<_> = points
                .iter()
                .map(|&(part, cell, vis)| {
                    let (x, y) = at(cell);
                    (part, x, y, vis)
                })
                .collect();
            img.keypoints = Some(kps(id, 64, &pts));
            img.mask = Some(mask.to_vec());
            img
        })
        .collect();
    Bundle {
        height: 2,
        width: 2,
        channels: 2,
        embedding_channels: 2,
        class_names: vec!["a".into(), "b".into()],
        part_names: vec!["beak".into(), "crown".into(), "wing".into(), "tail".into()],
        part_aliases: BTreeMap::new(),
        images,
        head,
        attributes: None,
        class_attributes: None,
        confusion: None,
        warnings: vec![],
    }
}

fn hand_trace(query: &str, distractors: &[&str], edits: &[(usize, usize, usize)], success: bool) -> TraceDocument {
    let trace = EditTrace {
        query_id: query.into(),
        query_class: 0,
        target_class: 1,
        distractor_ids: distractors.iter().map(|s| s.to_string()).collect(),
        edits: edits
            .iter()
            .map(|&(i, m, j)| Edit {
                candidate: Candidate::new(i, m, j),
                class_prob_after: 0.5,
                semantic_likelihood: 0.25,
                combined_score: 0.5f64.ln() + 0.4 * 0.25f64.ln(),
            })
            .collect(),
        success,
        final_probs: stable_softmax(&[0.0, if success { 1.0 } else { -1.0 }], 1.0).unwrap(),
        stats: SearchStats {
            head_evaluations: 1 + 2 * edits.len() as u64,
            dot_products: 16 * distractors.len() as u64,
            candidate_pool: 16 * distractors.len() as u64,
            candidates_per_edit: vec![1; edits.len()],
        },
    };
    TraceDocument::new(trace, SearchConfig::default())
}

/// The five hand-built traces of the golden suite, keyed by file name.
pub fn golden_traces() -> Vec<(String, TraceDocument)> {
    vec![
        ("case1.json".into(), hand_trace("A", &["B"], &[(0, 0, 0)], true)),
        ("case2.json".into(), hand_trace("A", &["C"], &[(1, 0, 1), (0, 0, 2)], true)),
        ("case3.json".into(), hand_trace("B", &["D", "E"], &[(3, 0, 0), (0, 1, 0), (1, 1, 3)], true)),
        ("case4.json".into(), hand_trace("C", &["A"], &[(2, 0, 3)], false)),
        ("case5.json".into(), hand_trace("E", &["B"], &[], true)),
    ]
}
