//! Explain one query image against distractors of another class.
//!
//! ```text
//! cargo run --example explain                 # synthetic bundle
//! cargo run --example explain -- path/to/bundle QUERY_ID TARGET_CLASS
//! ```

use counterfact::synthetic::{random_bundle, SyntheticSpec};
use counterfact::{find_counterfactual, head_forward, load_bundle, SearchConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let bundle = match args.first() {
        Some(path) => load_bundle(path)?,
        None => random_bundle(&SyntheticSpec::default(), 7)?,
    };
    let query = args.get(1).cloned().unwrap_or_else(|| bundle.images[0].id.clone());
    let predicted = head_forward(&bundle.head, &bundle.image(&query)?.features)?.argmax();
    let target = match args.get(2) {
        Some(name) => bundle.class_index(name)?,
        None => (predicted + 1) % bundle.class_names.len(),
    };
    let distractors: Vec<String> = bundle.images_of_class(target).map(|i| i.id.clone()).take(3).collect();

    let case = bundle.search_case(&query, &distractors, target)?;
    let trace = find_counterfactual(&bundle.head, &case, &SearchConfig::default())?;

    println!(
        "query {query}: {} -> {} using {} distractors",
        bundle.class_names[predicted],
        bundle.class_names[target],
        distractors.len()
    );
    for (k, e) in trace.edits.iter().enumerate() {
        let c = e.candidate;
        println!(
            "  edit {}: query cell {:>2} <- {} cell {:>2}   p(target) {:.4}  L {:.4}",
            k + 1,
            c.query_cell,
            trace.distractor_ids[c.distractor_image],
            c.distractor_cell,
            e.class_prob_after,
            e.semantic_likelihood
        );
    }
    println!(
        "{} after {} edits; {} head evaluations, {} dot products",
        if trace.success { "flipped" } else { "not flipped" },
        trace.edits.len(),
        trace.stats.head_evaluations,
        trace.stats.dot_products
    );
    Ok(())
}
