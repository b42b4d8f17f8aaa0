//! The checked-in fixtures must match their generators. Run with
//! `UPDATE_GOLDEN=1` to rewrite them after an intentional change.

mod common;

use std::fs;
use std::path::Path;

use counterfact::{cli, save_trace, write_bundle};

fn generate(root: &Path) {
    write_bundle(&common::minimal_bundle(), root.join("minimal")).unwrap();
    let corrupt = root.join("corrupt_blob");
    write_bundle(&common::minimal_bundle(), &corrupt).unwrap();
    let blob = corrupt.join("images/0000_features.f32");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    write_bundle(&common::planted_bundle(true), root.join("planted")).unwrap();

    let golden = root.join("golden");
    write_bundle(&common::golden_bundle(), golden.join("bundle")).unwrap();
    for (name, doc) in common::golden_traces() {
        save_trace(&doc, golden.join("traces").join(name)).unwrap();
    }
    for scope in ["all", "single"] {
        let code = cli::run([
            "counterfact",
            "evaluate",
            "--bundle",
            golden.join("bundle").to_str().unwrap(),
            "--traces",
            golden.join("traces").to_str().unwrap(),
            "--scope",
            scope,
            "--out",
            golden.join(format!("report_{scope}.json")).to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
}

#[test]
fn fixtures_are_current() {
    let fixtures = common::fixtures_dir();
    if common::updating_golden() {
        for sub in ["minimal", "corrupt_blob", "planted", "golden"] {
            let _ = fs::remove_dir_all(fixtures.join(sub));
        }
        generate(&fixtures);
        return;
    }
    let fresh = tempfile::tempdir().unwrap();
    generate(fresh.path());
    let expected = common::tree(fresh.path());
    let actual: Vec<_> = common::tree(&fixtures)
        .into_iter()
        .filter(|p| !p.starts_with("README.md"))
        .collect();
    assert_eq!(actual, expected, "fixture file list drifted; rerun with UPDATE_GOLDEN=1");
    for rel in &expected {
        let a = fs::read(fixtures.join(rel)).unwrap();
        let b = fs::read(fresh.path().join(rel)).unwrap();
        assert!(a == b, "{} differs from its generator", rel.display());
    }
}
