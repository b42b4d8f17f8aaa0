//! Rank part-attributes for the first edit of a counterfactual.

use counterfact::attributes::attribute_importance;
use counterfact::synthetic::{random_bundle, SyntheticSpec};
use counterfact::{apply_edit, find_counterfactual, head_forward, SearchConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bundle = random_bundle(&SyntheticSpec { attributes: 24, parts: 6, ..SyntheticSpec::default() }, 5)?;
    let bank = bundle.attributes.as_ref().expect("synthetic bundles carry attributes");
    let query = &bundle.images[0];
    let target = (head_forward(&bundle.head, &query.features)?.argmax() + 1) % bundle.class_names.len();
    let distractors: Vec<String> = bundle.images_of_class(target).map(|i| i.id.clone()).collect();
    let case = bundle.search_case(&query.id, &distractors, target)?;
    let trace = find_counterfactual(&bundle.head, &case, &SearchConfig::default())?;
    let Some(first) = trace.edits.first() else {
        println!("query already predicted as the target class");
        return Ok(());
    };

    let cand = first.candidate;
    let distractor = bundle.image(&trace.distractor_ids[cand.distractor_image])?;
    let edited = apply_edit(&query.features, &case.distractors, cand)?;
    let ranked = attribute_importance(
        &query.features,
        &edited,
        &bundle.head,
        bank,
        target,
        cand,
        query.part_probs.as_ref().unwrap(),
        distractor.part_probs.as_ref().unwrap(),
    )?;
    println!("edit {cand:?} towards {}", bundle.class_names[target]);
    println!("{:<14} {:>5} {:>9} {:>9} {:>9}", "attribute", "part", "s", "s'", "delta");
    for r in ranked.iter().take(5) {
        println!("{:<14} {:>5} {:>9.4} {:>9.4} {:>+9.4}", r.name, r.part, r.s, r.s_prime, r.delta);
    }
    Ok(())
}
