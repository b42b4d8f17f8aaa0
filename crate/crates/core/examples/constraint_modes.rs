//! Compare soft (prefilter plus semantic term), hard (cluster-matched pairs)
//! and unconstrained search on the same case, and sweep the semantic weight.

use counterfact::synthetic::{random_bundle, SyntheticSpec};
use counterfact::{find_counterfactual, head_forward, ConstraintMode, SearchConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bundle = random_bundle(&SyntheticSpec { images_per_class: 4, ..SyntheticSpec::default() }, 4)?;
    let query = &bundle.images[1];
    let target = (head_forward(&bundle.head, &query.features)?.argmax() + 1) % bundle.class_names.len();
    let distractors: Vec<String> = bundle.images_of_class(target).map(|i| i.id.clone()).collect();
    let case = bundle.search_case(&query.id, &distractors, target)?;

    for mode in [ConstraintMode::Soft, ConstraintMode::Hard, ConstraintMode::None] {
        let config = SearchConfig { constraint_mode: mode, hard_clusters: 12, ..SearchConfig::default() };
        let t = find_counterfactual(&bundle.head, &case, &config)?;
        println!(
            "{mode:<5?} pool {:>5}  edits {:>2}  success {}  mean L {:.4}",
            t.stats.candidate_pool,
            t.edits.len(),
            t.success,
            t.edits.iter().map(|e| e.semantic_likelihood).sum::<f64>() / t.edits.len().max(1) as f64
        );
    }

    println!("\nlambda sweep (no prefilter)");
    for lambda in [0.0, 0.1, 0.4, 1.0, 4.0] {
        let config = SearchConfig { lambda, constraint_mode: ConstraintMode::None, ..SearchConfig::default() };
        let t = find_counterfactual(&bundle.head, &case, &config)?;
        let first = t.edits.first().map(|e| format!("{:?}", e.candidate)).unwrap_or_default();
        println!("  lambda {lambda:<4} edits {:>2}  first {first}", t.edits.len());
    }
    Ok(())
}
