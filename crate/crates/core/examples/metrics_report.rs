//! Explain every image of one class and aggregate keypoint metrics, once with
//! the semantic term and once without it.

use counterfact::metrics::{aggregate_report, render_report, Scope};
use counterfact::synthetic::{random_bundle, SyntheticSpec};
use counterfact::{find_counterfactual, ConstraintMode, SearchConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bundle = random_bundle(&SyntheticSpec { images_per_class: 5, parts: 8, ..SyntheticSpec::default() }, 12)?;
    let (query_class, target) = (0, 1);
    let distractors: Vec<String> = bundle.images_of_class(target).map(|i| i.id.clone()).take(3).collect();

    for lambda in [0.0, 0.4] {
        let config = SearchConfig { lambda, constraint_mode: ConstraintMode::None, ..SearchConfig::default() };
        let mut cases = Vec::new();
        for query in bundle.images_of_class(query_class) {
            let case = bundle.search_case(&query.id, &distractors, target)?;
            let trace = find_counterfactual(&bundle.head, &case, &config)?;
            let ann = bundle.annotations(&trace)?;
            cases.push((trace, ann));
        }
        for scope in [Scope::SingleEdit, Scope::AllEdits] {
            println!("lambda {lambda}, {scope:?}:");
            print!("{}", render_report(&aggregate_report(&cases, scope, 0)?));
        }
    }
    Ok(())
}
