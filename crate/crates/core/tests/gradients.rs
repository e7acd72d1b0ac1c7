use dxformer::gradcheck::suite::{run_suite, SuiteConfig};

#[test]
fn every_component_matches_finite_differences() {
    let results = run_suite(&SuiteConfig::default()).unwrap();
    assert!(results.len() >= 16);
    for r in &results {
        eprintln!("{} {:.3e}", r.name, r.report.max_rel_error);
        assert!(
            r.passes(),
            "{}: max rel error {:.3e} at {:?}",
            r.name,
            r.report.max_rel_error,
            r.report.worst_index
        );
    }
}
