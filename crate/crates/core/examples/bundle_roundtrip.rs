//! Write a bundle to disk, read it back, and save a trace document.

use counterfact::synthetic::{random_bundle, SyntheticSpec};
use counterfact::{find_counterfactual, load_bundle, load_trace, save_trace, write_bundle, SearchConfig, TraceDocument};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("counterfact-example-bundle");
    let bundle = random_bundle(&SyntheticSpec::default(), 2)?;
    let manifest = write_bundle(&bundle, &dir)?;
    println!("wrote {}", manifest.display());

    let loaded = load_bundle(&dir)?;
    assert_eq!(loaded, bundle);
    println!("{} images, {} classes, tensors identical after reload", loaded.images.len(), loaded.class_names.len());

    let ids: Vec<String> = loaded.images_of_class(2).map(|i| i.id.clone()).collect();
    let case = loaded.search_case(&loaded.images[0].id, &ids, 2)?;
    let config = SearchConfig::default();
    let doc = TraceDocument::new(find_counterfactual(&loaded.head, &case, &config)?, config);
    let path = dir.join("trace.json");
    save_trace(&doc, &path)?;
    assert_eq!(load_trace(&path)?, doc);
    println!("trace with {} edits saved to {}", doc.trace.edits.len(), path.display());
    Ok(())
}
