//! Choose a distractor class for every class, from the confusion matrix and
//! from class-attribute similarity.

use counterfact::metrics::{select_distractor_class, select_distractor_class_by_attributes};
use counterfact::synthetic::{random_bundle, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bundle = random_bundle(&SyntheticSpec { classes: 8, ..SyntheticSpec::default() }, 9)?;
    let cm = bundle.confusion.as_ref().unwrap();
    let attrs = bundle.class_attributes.as_ref().unwrap();
    println!("{:<10} {:<12} {:<12}", "class", "confusion", "attributes");
    for c in 0..bundle.class_names.len() {
        let by_confusion = select_distractor_class(cm, c).map(|d| bundle.class_names[d].clone());
        let by_attributes = select_distractor_class_by_attributes(attrs, c)?;
        println!(
            "{:<10} {:<12} {:<12}",
            bundle.class_names[c],
            by_confusion.unwrap_or_else(|_| "-".into()),
            bundle.class_names[by_attributes]
        );
    }
    Ok(())
}
