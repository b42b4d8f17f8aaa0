//! Keypoint- and mask-based evaluation of edit traces, cluster purity, and
//! query/distractor class selection.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attributes::ClassAttributeMatrix;
use crate::error::{Error, Result};
use crate::search::{Edit, EditTrace};
use crate::semantic::ClusterAssignment;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub part: usize,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub points: Vec<Keypoint>,
}

/// Set of part ids present in each grid cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartGrid {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<BTreeSet<usize>>,
}

impl PartGrid {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![BTreeSet::new(); height * width],
        }
    }

    pub fn parts(&self, cell: usize) -> &BTreeSet<usize> {
        &self.cells[cell]
    }

    /// Whether any cell within Chebyshev distance `dilation` of `cell` holds a keypoint.
    pub fn has_keypoint(&self, cell: usize, dilation: usize) -> bool {
        let (r, c) = (cell / self.width, cell % self.width);
        let rows = r.saturating_sub(dilation)..=(r + dilation).min(self.height - 1);
        rows.into_iter().any(|rr| {
            let cols = c.saturating_sub(dilation)..=(c + dilation).min(self.width - 1);
            cols.into_iter().any(|cc| !self.cells[rr * self.width + cc].is_empty())
        })
    }
}

/// Drops each visible keypoint into the grid cell covering it.
pub fn project_keypoints(kps: &KeypointSet, height: usize, width: usize) -> Result<PartGrid> {
    if kps.image_width == 0 || kps.image_height == 0 {
        return Err(Error::Invalid(format!("image `{}` has a zero dimension", kps.image_id)));
    }
    if height == 0 || width == 0 {
        return Err(Error::Invalid("part grid needs at least one cell".into()));
    }
    let mut grid = PartGrid::empty(height, width);
    for p in kps.points.iter().filter(|p| p.visible) {
        let row = ((p.y * height as f64 / f64::from(kps.image_height)).floor().max(0.0) as usize).min(height - 1);
        let col = ((p.x * width as f64 / f64::from(kps.image_width)).floor().max(0.0) as usize).min(width - 1);
        grid.cells[row * width + col].insert(p.part);
    }
    Ok(grid)
}

/// Which edits a metric looks at.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    SingleEdit,
    #[default]
    AllEdits,
}

fn scoped(trace: &EditTrace, scope: Scope) -> &[Edit] {
    match scope {
        Scope::SingleEdit => &trace.edits[..trace.edits.len().min(1)],
        Scope::AllEdits => &trace.edits,
    }
}

fn distractor<'a, T>(items: &'a [T], image: usize, what: &str) -> Result<&'a T> {
    items
        .get(image)
        .ok_or_else(|| Error::Invalid(format!("missing {what} for distractor {image}")))
}

fn check_grid(grid: &PartGrid, cell: usize) -> Result<()> {
    if cell >= grid.cells.len() {
        return Err(Error::shape(format!("cell {cell} outside a {}x{} part grid", grid.height, grid.width)));
    }
    Ok(())
}

/// Fraction of selected regions holding a keypoint, query and distractor cells
/// counted as separate regions. `None` when the scope contains no edits.
pub fn near_kp(
    trace: &EditTrace,
    query_parts: &PartGrid,
    distractor_parts: &[PartGrid],
    scope: Scope,
    dilation: usize,
) -> Result<Option<f64>> {
    let edits = scoped(trace, scope);
    if edits.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for e in edits {
        let c = e.candidate;
        let dist = distractor(distractor_parts, c.distractor_image, "part grid")?;
        check_grid(query_parts, c.query_cell)?;
        check_grid(dist, c.distractor_cell)?;
        hits += usize::from(query_parts.has_keypoint(c.query_cell, dilation));
        hits += usize::from(dist.has_keypoint(c.distractor_cell, dilation));
    }
    Ok(Some(hits as f64 / (2 * edits.len()) as f64))
}

/// Fraction of edits whose query and distractor cells share a part.
pub fn same_kp(
    trace: &EditTrace,
    query_parts: &PartGrid,
    distractor_parts: &[PartGrid],
    scope: Scope,
) -> Result<Option<f64>> {
    let edits = scoped(trace, scope);
    if edits.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for e in edits {
        let c = e.candidate;
        let dist = distractor(distractor_parts, c.distractor_image, "part grid")?;
        check_grid(query_parts, c.query_cell)?;
        check_grid(dist, c.distractor_cell)?;
        let shared = query_parts
            .parts(c.query_cell)
            .intersection(dist.parts(c.distractor_cell))
            .next()
            .is_some();
        hits += usize::from(shared);
    }
    Ok(Some(hits as f64 / edits.len() as f64))
}

/// Fraction of selected regions on the foreground, counting both sides of each edit.
pub fn foreground_fraction(
    trace: &EditTrace,
    query_mask: &[bool],
    distractor_masks: &[Vec<bool>],
    scope: Scope,
) -> Result<Option<f64>> {
    let edits = scoped(trace, scope);
    if edits.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for e in edits {
        let c = e.candidate;
        let mask = distractor(distractor_masks, c.distractor_image, "mask")?;
        let q = query_mask
            .get(c.query_cell)
            .ok_or_else(|| Error::shape(format!("query mask lacks cell {}", c.query_cell)))?;
        let d = mask
            .get(c.distractor_cell)
            .ok_or_else(|| Error::shape(format!("distractor mask lacks cell {}", c.distractor_cell)))?;
        hits += usize::from(*q) + usize::from(*d);
    }
    Ok(Some(hits as f64 / (2 * edits.len()) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterVote {
    pub cluster: usize,
    pub part: Option<usize>,
    pub members: usize,
    pub hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub accuracy: f64,
    pub evaluated_cells: usize,
    pub clusters: Vec<ClusterVote>,
}

/// Majority-vote part per cluster, then the fraction of annotated cells whose
/// part set contains their cluster's part. Cells without parts are ignored.
pub fn clustering_accuracy(
    assignment: &ClusterAssignment,
    part_grids: &BTreeMap<String, PartGrid>,
) -> Result<ClusteringReport> {
    let mut members: Vec<Vec<&BTreeSet<usize>>> = vec![Vec::new(); assignment.k];
    for span in &assignment.images {
        let Some(grid) = part_grids.get(&span.id) else {
            continue;
        };
        if grid.cells.len() != span.len {
            return Err(Error::shape(format!(
                "image `{}` has {} clustered cells but a {}-cell part grid",
                span.id,
                span.len,
                grid.cells.len()
            )));
        }
        for (cell, parts) in grid.cells.iter().enumerate() {
            if !parts.is_empty() {
                members[assignment.labels[span.start + cell]].push(parts);
            }
        }
    }
    let evaluated: usize = members.iter().map(Vec::len).sum();
    if evaluated == 0 {
        return Err(Error::Invalid("no clustered cell carries a part annotation".into()));
    }
    let mut clusters = Vec::with_capacity(assignment.k);
    let mut total_hits = 0;
    for (cluster, cells) in members.iter().enumerate() {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for parts in cells {
            for &p in *parts {
                *counts.entry(p).or_default() += 1;
            }
        }
        // BTreeMap iterates ascending, so strict > keeps the lowest part on ties
        let part = counts
            .iter()
            .fold(None, |best: Option<(usize, usize)>, (&p, &n)| match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((p, n)),
            })
            .map(|(p, _)| p);
        let hits = part.map_or(0, |p| cells.iter().filter(|s| s.contains(&p)).count());
        total_hits += hits;
        clusters.push(ClusterVote {
            cluster,
            part,
            members: cells.len(),
            hits,
        });
    }
    Ok(ClusteringReport {
        accuracy: total_hits as f64 / evaluated as f64,
        evaluated_cells: evaluated,
        clusters,
    })
}

/// `|C| x |C|` prediction counts; rows are true classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape(format!(
                "confusion matrix for {classes} classes needs {} counts, got {}",
                classes * classes,
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }
}

/// The class that `class` is most often mistaken for; ties go to the lower index.
pub fn select_distractor_class(cm: &ConfusionMatrix, class: usize) -> Result<usize> {
    if class >= cm.classes {
        return Err(Error::OutOfRange(format!("class {class} of {}", cm.classes)));
    }
    let row = cm.row(class);
    let mut best: Option<usize> = None;
    for (j, &n) in row.iter().enumerate() {
        if j == class || n == 0 {
            continue;
        }
        if best.is_none_or(|b| n > row[b]) {
            best = Some(j);
        }
    }
    best.ok_or_else(|| Error::Invalid(format!("class {class} is never confused with another class")))
}

/// Nearest other class by Euclidean distance between attribute rows.
pub fn select_distractor_class_by_attributes(attrs: &ClassAttributeMatrix, class: usize) -> Result<usize> {
    if attrs.classes() < 2 {
        return Err(Error::Invalid("need at least two classes".into()));
    }
    if class >= attrs.classes() {
        return Err(Error::OutOfRange(format!("class {class} of {}", attrs.classes())));
    }
    let own = attrs.row(class);
    let mut best: Option<(usize, f64)> = None;
    for other in (0..attrs.classes()).filter(|&c| c != class) {
        let d: f64 = own.iter().zip(attrs.row(other)).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((other, d));
        }
    }
    Ok(best.expect("two classes").0)
}

/// Annotations needed to score one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseAnnotations {
    pub query_parts: PartGrid,
    /// Indexed like the trace's distractor list.
    pub distractor_parts: Vec<PartGrid>,
    pub query_mask: Option<Vec<bool>>,
    pub distractor_masks: Option<Vec<Vec<bool>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub near_kp: Option<f64>,
    pub same_kp: Option<f64>,
    pub edits: usize,
    pub foreground: Option<f64>,
    pub success: bool,
}

pub fn trace_metrics(trace: &EditTrace, ann: &CaseAnnotations, scope: Scope, dilation: usize) -> Result<TraceMetrics> {
    let foreground = match (&ann.query_mask, &ann.distractor_masks) {
        (Some(q), Some(d)) => foreground_fraction(trace, q, d, scope)?,
        _ => None,
    };
    Ok(TraceMetrics {
        near_kp: near_kp(trace, &ann.query_parts, &ann.distractor_parts, scope, dilation)?,
        same_kp: same_kp(trace, &ann.query_parts, &ann.distractor_parts, scope)?,
        edits: trace.edits.len(),
        foreground,
        success: trace.success,
    })
}

/// Aggregate over many traces. Column order follows Near-KP, Same-KP, #Edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub near_kp: Option<f64>,
    pub same_kp: Option<f64>,
    /// Mean trace length over successful traces.
    pub mean_edits: Option<f64>,
    /// Present only when every scored trace has masks.
    pub foreground: Option<f64>,
    pub scope: Scope,
    pub case_count: usize,
    /// Traces with at least one scoped edit; keypoint means run over these.
    pub scored_cases: usize,
    pub successful_cases: usize,
    pub failed_cases: usize,
    pub failure_rate: f64,
    pub near_kp_aggregation: String,
    pub keypoint_dilation: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate_report(
    cases: &[(EditTrace, CaseAnnotations)],
    scope: Scope,
    dilation: usize,
) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::Invalid("no traces to aggregate".into()));
    }
    let per_case = cases
        .iter()
        .map(|(t, a)| trace_metrics(t, a, scope, dilation))
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<&TraceMetrics> = per_case.iter().filter(|m| m.near_kp.is_some()).collect();
    let foreground = if scored.iter().all(|m| m.foreground.is_some()) {
        mean(scored.iter().filter_map(|m| m.foreground))
    } else {
        None
    };
    let successful = per_case.iter().filter(|m| m.success).count();
    let failed = per_case.len() - successful;
    Ok(MetricsReport {
        near_kp: mean(scored.iter().filter_map(|m| m.near_kp)),
        same_kp: mean(scored.iter().filter_map(|m| m.same_kp)),
        mean_edits: mean(per_case.iter().filter(|m| m.success).map(|m| m.edits as f64)),
        foreground,
        scope,
        case_count: per_case.len(),
        scored_cases: scored.len(),
        successful_cases: successful,
        failed_cases: failed,
        failure_rate: failed as f64 / per_case.len() as f64,
        near_kp_aggregation: "per_region".into(),
        keypoint_dilation: dilation,
    })
}

/// Deterministic text rendering used for report files.
pub fn render_report(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::Candidate;
    use crate::numerics::stable_softmax;
    use crate::search::SearchStats;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace(edits: &[(usize, usize, usize)], success: bool) -> EditTrace {
        EditTrace {
            query_id: "q".into(),
            query_class: 0,
            target_class: 1,
            distractor_ids: vec!["d0".into(), "d1".into()],
            edits: edits
                .iter()
                .map(|&(i, m, j)| Edit {
                    candidate: Candidate::new(i, m, j),
                    class_prob_after: 0.5,
                    semantic_likelihood: 0.5,
                    combined_score: 0.0,
                })
                .collect(),
            success,
            final_probs: stable_softmax(&[0.0, 1.0], 1.0).unwrap(),
            stats: SearchStats::default(),
        }
    }

    fn grid(h: usize, w: usize, parts: &[(usize, &[usize])]) -> PartGrid {
        let mut g = PartGrid::empty(h, w);
        for (cell, ps) in parts {
            g.cells[*cell].extend(ps.iter().copied());
        }
        g
    }

    fn kps(points: &[(usize, f64, f64, bool)]) -> KeypointSet {
        KeypointSet {
            image_id: "img".into(),
            image_width: 224,
            image_height: 224,
            points: points
                .iter()
                .map(|&(part, x, y, visible)| Keypoint { part, x, y, visible })
                .collect(),
        }
    }

    #[test]
    fn projection_examples() {
        let g = project_keypoints(&kps(&[(4, 100.0, 50.0, true), (2, 223.0, 223.0, true), (9, 5.0, 5.0, false)]), 7, 7)
            .unwrap();
        assert!(g.parts(7 + 3).contains(&4));
        assert!(g.parts(48).contains(&2));
        assert!(g.parts(0).is_empty());
        let mut bad = kps(&[]);
        bad.image_width = 0;
        assert!(project_keypoints(&bad, 7, 7).is_err());
    }

    #[test]
    fn projection_matches_reference_and_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let points: Vec<_> = (0..60)
            .map(|i| (i % 15, rng.random_range(0.0..224.0), rng.random_range(0.0..224.0), rng.random_bool(0.8)))
            .collect();
        let set = kps(&points);
        let g = project_keypoints(&set, 7, 7).unwrap();
        let mut reference = vec![BTreeSet::new(); 49];
        for &(part, x, y, vis) in &points {
            if vis {
                let (r, c) = ((y / 32.0) as usize, (x / 32.0) as usize);
                reference[r * 7 + c].insert(part);
            }
        }
        assert_eq!(g.cells, reference);
        assert_eq!(project_keypoints(&set, 7, 7).unwrap(), g);
        // cell centres re-project onto the same cells
        let centres: Vec<_> = g
            .cells
            .iter()
            .enumerate()
            .flat_map(|(cell, ps)| {
                let (r, c) = (cell / 7, cell % 7);
                ps.iter().map(move |&p| (p, c as f64 * 32.0 + 16.0, r as f64 * 32.0 + 16.0, true))
            })
            .collect();
        assert_eq!(project_keypoints(&kps(&centres), 7, 7).unwrap(), g);
    }

    #[test]
    fn near_and_same_kp_single_edit() {
        let q = grid(2, 2, &[(0, &[1]), (1, &[3])]);
        let d = vec![grid(2, 2, &[(0, &[1, 2])]), grid(2, 2, &[])];
        let both = trace(&[(0, 0, 0)], true);
        assert_eq!(near_kp(&both, &q, &d, Scope::AllEdits, 0).unwrap(), Some(1.0));
        assert_eq!(same_kp(&both, &q, &d, Scope::AllEdits).unwrap(), Some(1.0));
        let half = trace(&[(0, 1, 0)], true);
        assert_eq!(near_kp(&half, &q, &d, Scope::AllEdits, 0).unwrap(), Some(0.5));
        assert_eq!(same_kp(&half, &q, &d, Scope::AllEdits).unwrap(), Some(0.0));
        let disjoint = trace(&[(1, 0, 0)], true);
        assert_eq!(same_kp(&disjoint, &q, &d, Scope::AllEdits).unwrap(), Some(0.0));
    }

    #[test]
    fn three_edit_hand_count() {
        // query cells 0:{1} 1:{} 2:{2}; distractor 0 cells 0:{1} 3:{5}
        let q = grid(2, 2, &[(0, &[1]), (2, &[2])]);
        let d = vec![grid(2, 2, &[(0, &[1]), (3, &[5])]), grid(2, 2, &[(1, &[2])])];
        let t = trace(&[(0, 0, 0), (1, 0, 3), (2, 1, 1)], true);
        // regions with keypoints: (q0,d0) 2, (q1 empty, d3) 1, (q2, d1') 2 => 5 of 6
        assert_eq!(near_kp(&t, &q, &d, Scope::AllEdits, 0).unwrap(), Some(5.0 / 6.0));
        // matching parts: edit 0 and edit 2
        assert_eq!(same_kp(&t, &q, &d, Scope::AllEdits).unwrap(), Some(2.0 / 3.0));
        assert_eq!(near_kp(&t, &q, &d, Scope::SingleEdit, 0).unwrap(), Some(1.0));
        // dilation 1 on a 2x2 grid reaches every cell
        assert_eq!(near_kp(&t, &q, &d, Scope::AllEdits, 1).unwrap(), Some(1.0));
    }

    #[test]
    fn same_kp_mixed_four() {
        let q = grid(2, 2, &[(0, &[1]), (1, &[2]), (2, &[3]), (3, &[4])]);
        let d = vec![grid(2, 2, &[(0, &[1]), (1, &[9]), (2, &[3]), (3, &[8])])];
        let t = trace(&[(0, 0, 0), (1, 0, 1), (2, 0, 2), (3, 0, 3)], true);
        assert_eq!(same_kp(&t, &q, &d, Scope::AllEdits).unwrap(), Some(0.5));
    }

    #[test]
    fn missing_distractor_annotation() {
        let q = grid(2, 2, &[]);
        let t = trace(&[(0, 1, 0)], true);
        assert!(near_kp(&t, &q, std::slice::from_ref(&q), Scope::AllEdits, 0).is_err());
        assert!(foreground_fraction(&t, &[true; 4], &[vec![true; 4]], Scope::AllEdits).is_err());
    }

    #[test]
    fn foreground_examples() {
        let t = trace(&[(0, 0, 1), (3, 0, 2)], true);
        assert_eq!(foreground_fraction(&t, &[true; 4], &[vec![true; 4]], Scope::AllEdits).unwrap(), Some(1.0));
        assert_eq!(foreground_fraction(&t, &[false; 4], &[vec![false; 4]], Scope::AllEdits).unwrap(), Some(0.0));
        let checker = vec![true, false, false, true];
        // q0 fg, d1 bg, q3 fg, d2 bg
        assert_eq!(foreground_fraction(&t, &checker, std::slice::from_ref(&checker), Scope::AllEdits).unwrap(), Some(0.5));
    }

    #[test]
    fn same_hit_implies_both_regions_hit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut q = PartGrid::empty(3, 3);
            let mut d = PartGrid::empty(3, 3);
            for cell in 0..9 {
                if rng.random_bool(0.5) {
                    q.cells[cell].insert(rng.random_range(0..3));
                }
                if rng.random_bool(0.5) {
                    d.cells[cell].insert(rng.random_range(0..3));
                }
            }
            let t = trace(&[(rng.random_range(0..9), 0, rng.random_range(0..9))], true);
            let same = same_kp(&t, &q, &[d.clone()], Scope::AllEdits).unwrap().unwrap();
            let near = near_kp(&t, &q, &[d], Scope::AllEdits, 0).unwrap().unwrap();
            assert!(same <= if near == 1.0 { 1.0 } else { 0.0 });
        }
    }

    fn assignment(labels: &[usize], spans: &[(&str, usize)]) -> ClusterAssignment {
        let mut images = Vec::new();
        let mut start = 0;
        for (id, len) in spans {
            images.push(crate::semantic::ImageSpan { id: id.to_string(), start, len: *len });
            start += len;
        }
        let k = labels.iter().max().unwrap() + 1;
        ClusterAssignment {
            k,
            dim: 1,
            centers: vec![0.0; k],
            labels: labels.to_vec(),
            seed: 0,
            inertia: 0.0,
            inertia_history: vec![],
            iterations: 0,
            max_iterations: 300,
            tolerance: 1e-4,
            images,
        }
    }

    #[test]
    fn clustering_majority_vote() {
        let a = assignment(&[0, 0, 0], &[("a", 3)]);
        let parts = BTreeMap::from([("a".to_string(), grid(1, 3, &[(0, &[0]), (1, &[0]), (2, &[1])]))]);
        let r = clustering_accuracy(&a, &parts).unwrap();
        assert_eq!(r.clusters[0].part, Some(0));
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-12);

        let a = assignment(&[0, 1, 0, 1], &[("a", 2), ("b", 2)]);
        let parts = BTreeMap::from([
            ("a".to_string(), grid(1, 2, &[(0, &[4]), (1, &[7])])),
            ("b".to_string(), grid(1, 2, &[(0, &[4]), (1, &[7])])),
        ]);
        assert_eq!(clustering_accuracy(&a, &parts).unwrap().accuracy, 1.0);

        let empty = BTreeMap::from([("a".to_string(), grid(1, 2, &[]))]);
        assert!(clustering_accuracy(&a, &empty).is_err());
    }

    #[test]
    fn clustering_tie_goes_to_lower_part() {
        let a = assignment(&[0, 0], &[("a", 2)]);
        let parts = BTreeMap::from([("a".to_string(), grid(1, 2, &[(0, &[3]), (1, &[1])]))]);
        assert_eq!(clustering_accuracy(&a, &parts).unwrap().clusters[0].part, Some(1));
    }

    #[test]
    fn confusion_selection() {
        let cm = ConfusionMatrix::new(3, vec![9, 5, 3, 0, 1, 0, 4, 4, 7]).unwrap();
        assert_eq!(select_distractor_class(&cm, 0).unwrap(), 1);
        assert_eq!(select_distractor_class(&cm, 2).unwrap(), 0);
        assert!(select_distractor_class(&cm, 1).is_err());
        let scaled = ConfusionMatrix::new(3, vec![27, 15, 9, 0, 1, 0, 12, 12, 21]).unwrap();
        assert_eq!(select_distractor_class(&scaled, 0).unwrap(), 1);
    }

    #[test]
    fn confusion_selection_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let counts: Vec<u64> = (0..200 * 200).map(|_| rng.random_range(0..6)).collect();
        let cm = ConfusionMatrix::new(200, counts.clone()).unwrap();
        for c in 0..200 {
            let mut best = usize::MAX;
            let mut best_n = 0;
            for j in 0..200 {
                if j != c && counts[c * 200 + j] > best_n {
                    best_n = counts[c * 200 + j];
                    best = j;
                }
            }
            if best == usize::MAX {
                assert!(select_distractor_class(&cm, c).is_err());
            } else {
                assert_eq!(select_distractor_class(&cm, c).unwrap(), best);
            }
        }
    }

    #[test]
    fn attribute_selection() {
        let m = ClassAttributeMatrix::new(3, 2, vec![0.2, 0.8, 0.9, 0.1, 0.2, 0.8]).unwrap();
        assert_eq!(select_distractor_class_by_attributes(&m, 0).unwrap(), 2);
        let onehot = ClassAttributeMatrix::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(select_distractor_class_by_attributes(&onehot, 2).unwrap(), 0);
        let single = ClassAttributeMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(select_distractor_class_by_attributes(&single, 0).is_err());
    }

    #[test]
    fn attribute_selection_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data: Vec<f64> = (0..160).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = ClassAttributeMatrix::new(10, 16, data.clone()).unwrap();
        for c in 0..10 {
            let mut best = (usize::MAX, f64::INFINITY);
            for o in 0..10 {
                if o == c {
                    continue;
                }
                let d: f64 = (0..16).map(|t| (data[c * 16 + t] - data[o * 16 + t]).powi(2)).sum::<f64>().sqrt();
                if d < best.1 {
                    best = (o, d);
                }
            }
            assert_eq!(select_distractor_class_by_attributes(&m, c).unwrap(), best.0);
        }
    }

    #[test]
    fn aggregate_means() {
        let q = grid(2, 2, &[(0, &[1])]);
        let d = vec![grid(2, 2, &[(0, &[1])]), grid(2, 2, &[(0, &[2])])];
        let ann = CaseAnnotations {
            query_parts: q,
            distractor_parts: d,
            query_mask: None,
            distractor_masks: None,
        };
        let one = aggregate_report(&[(trace(&[(0, 0, 0)], true), ann.clone())], Scope::AllEdits, 0).unwrap();
        assert_eq!((one.near_kp, one.same_kp, one.mean_edits), (Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!(one.foreground, None);
        let two = aggregate_report(
            &[(trace(&[(0, 0, 0)], true), ann.clone()), (trace(&[(0, 1, 0), (1, 0, 0)], false), ann.clone())],
            Scope::AllEdits,
            0,
        )
        .unwrap();
        assert_eq!(two.same_kp, Some(0.5));
        assert_eq!(two.mean_edits, Some(1.0));
        assert_eq!((two.failed_cases, two.failure_rate), (1, 0.5));
        assert!(aggregate_report(&[], Scope::AllEdits, 0).is_err());
    }
}
