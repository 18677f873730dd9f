use insta_core::gradsuite::{module_checks, op_checks};

#[test]
fn every_op_at_a_hundred_points() {
    for seed in 0..100 {
        for e in op_checks(seed, 1e-5).unwrap() {
            assert!(e.max_rel_err < 1e-5, "{} at seed {seed}: {}", e.name, e.max_rel_err);
        }
    }
}

#[test]
fn modules_and_micro_episodes() {
    let entries = module_checks(0, 1e-6).unwrap();
    let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names, ["generator", "context", "pipeline_ix", "pipeline_viii", "backbone"]);
    for e in entries {
        assert!(e.max_rel_err < 1e-5, "{}: {}", e.name, e.max_rel_err);
    }
}
