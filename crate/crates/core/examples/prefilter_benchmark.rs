//! Head evaluations and wall time of one edit with and without the
//! similarity prefilter, on a 7x7 grid with five distractors.
//!
//! Run with `--release` for meaningful timings.

use std::time::Instant;

use counterfact::synthetic::{random_bundle, SyntheticSpec};
use counterfact::{find_counterfactual, head_forward, SearchConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SyntheticSpec {
        channels: 256,
        embedding_channels: 64,
        classes: 40,
        images_per_class: 6,
        attributes: 0,
        ..SyntheticSpec::default()
    };
    let bundle = random_bundle(&spec, 1)?;
    let query = &bundle.images[0];
    let predicted = head_forward(&bundle.head, &query.features)?.argmax();
    let target = (predicted + 1) % spec.classes;
    let distractors: Vec<String> = bundle.images_of_class(target).map(|i| i.id.clone()).take(5).collect();
    let case = bundle.search_case(&query.id, &distractors, target)?;

    println!("{:>6} {:>12} {:>12} {:>10}", "k", "evaluations", "dot prods", "ms");
    let mut baseline = None;
    for k in [1.0, 0.5, 0.25, 0.10, 0.05] {
        let config = SearchConfig { k_fraction: k, max_edits: Some(1), ..SearchConfig::default() };
        let mut best = f64::INFINITY;
        let mut trace = None;
        for _ in 0..5 {
            let start = Instant::now();
            trace = Some(find_counterfactual(&bundle.head, &case, &config)?);
            best = best.min(start.elapsed().as_secs_f64() * 1e3);
        }
        let trace = trace.unwrap();
        let base = *baseline.get_or_insert(best);
        println!(
            "{k:>6.2} {:>12} {:>12} {best:>10.2}  ({:.1}x)",
            trace.stats.candidates_per_edit[0],
            trace.stats.dot_products,
            base / best
        );
    }
    Ok(())
}
