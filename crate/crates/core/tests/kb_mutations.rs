//! Seeded defects in an otherwise clean knowledge base must each be reported
//! with the right violation code.

mod support;

use kerntune_core::kb::validate_knowledge_base;

#[test]
fn base_knowledge_bases_are_clean() {
    for rel in ["fixtures/kbs/dense", "fixtures/kbs/layered"] {
        let report = validate_knowledge_base(&support::load_kb(rel));
        assert!(!report.has_errors(), "{rel}: {:?}", report.violations);
    }
}

#[test]
fn every_seeded_defect_is_caught() {
    let all = support::kb_mutations("kb_mutations/dense.json");
    assert!(all.len() >= 20);
    let misses: Vec<String> = all.iter().filter_map(support::mutation_miss).collect();
    assert!(misses.is_empty(), "{misses:#?}");
}

#[test]
fn required_defect_classes_are_represented() {
    let all = support::kb_mutations("kb_mutations/dense.json");
    for code in ["DanglingReference", "CyclicDependency", "DuplicateRank", "UncoveredBottleneck"] {
        let n = all.iter().filter(|m| m.expect == code).count();
        assert!(n >= 2, "{code}: only {n} mutation(s)");
    }
}
