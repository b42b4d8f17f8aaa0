//! Cluster all cell embeddings of a bundle and measure how often a cell holds
//! the part its cluster votes for.

use std::collections::BTreeMap;

use counterfact::metrics::clustering_accuracy;
use counterfact::semantic::cluster_images;
use counterfact::synthetic::{random_bundle, SyntheticSpec};
use counterfact::load_bundle;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bundle = match std::env::args().nth(1) {
        Some(path) => load_bundle(path)?,
        None => random_bundle(&SyntheticSpec { images_per_class: 6, ..SyntheticSpec::default() }, 3)?,
    };
    let grids: Vec<_> = bundle.images.iter().map(|i| (i.id.as_str(), &i.embedding)).collect();
    let mut parts = BTreeMap::new();
    for img in &bundle.images {
        if let Some(grid) = img.part_grid() {
            parts.insert(img.id.clone(), grid?);
        }
    }
    for k in [2, 5, 10, 20] {
        let assignment = cluster_images(&grids, k, 0)?;
        let report = clustering_accuracy(&assignment, &parts)?;
        println!(
            "k {k:>3}: accuracy {:.3} over {} annotated cells, inertia {:.3} after {} iterations",
            report.accuracy, report.evaluated_cells, assignment.inertia, assignment.iterations
        );
    }
    Ok(())
}
