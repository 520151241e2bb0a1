mod support;

use kerntune_core::decision::recommend;
use kerntune_core::kb::validate_knowledge_base;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{brute_force, held_forbidden, load_kb, oracle_env, random_bundle, truth};

const KBS: [&str; 3] = ["kb", "fixtures/kbs/dense", "fixtures/kbs/layered"];

#[test]
fn fixture_kbs_are_valid_and_small() {
    for rel in KBS {
        let kb = load_kb(rel);
        let report = validate_knowledge_base(&kb);
        assert!(report.is_clean(), "{rel}: {:#?}", report.violations);
        assert!(kb.decision_table.len() <= 50);
    }
}

#[test]
fn recommend_agrees_with_exhaustive_matcher() {
    for (i, rel) in KBS.iter().enumerate() {
        let kb = load_kb(rel);
        let mut rng = ChaCha8Rng::seed_from_u64(7 + i as u64);
        let mut matched = 0;
        for n in 0..400 {
            let bundle = random_bundle(&kb, &mut rng);
            let (rec, _) = recommend(&bundle, &kb);
            let oracle = brute_force(&bundle, &kb);
            assert_eq!(rec.matched_case, oracle.matched_case, "{rel} bundle {n}: {bundle:?}");
            assert_eq!(rec.method_ids(), oracle.methods, "{rel} bundle {n}");
            matched += usize::from(!rec.fallback);
        }
        // Both outcomes must be exercised for the comparison to mean anything.
        assert!(matched > 40 && matched < 390, "{rel}: {matched}/400 matched");
    }
}

#[test]
fn trace_truth_values_reproduce_and_vetoes_are_sound() {
    for (i, rel) in KBS.iter().enumerate() {
        let kb = load_kb(rel);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        for _ in 0..200 {
            let bundle = random_bundle(&kb, &mut rng);
            let (rec, trace) = recommend(&bundle, &kb);
            assert_eq!(trace.evidence, oracle_env(&bundle, &kb));
            for p in &trace.predicates {
                let expr = kerntune_core::expr::Expr::parse(&p.expression).unwrap();
                assert_eq!(truth(&expr, &trace.evidence), p.holds, "{rel}: {}", p.name);
            }
            let forbidden = held_forbidden(&trace.evidence, &kb);
            for m in rec.method_ids() {
                assert!(!forbidden.contains(m), "{rel}: vetoed {m} returned");
            }
            assert_eq!(rec.fallback, rec.matched_case.is_none());
            assert_eq!(rec.fallback, rec.methods.is_empty());
        }
    }
}

#[test]
fn unrelated_unknown_metric_never_changes_recommendation() {
    let kb = load_kb("kb");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let bundle = random_bundle(&kb, &mut rng);
        let mut noisy = bundle.clone();
        noisy.raw_metrics.insert("zz__not_in_mapping.avg".into(), 12345.0);
        assert_eq!(recommend(&bundle, &kb).0, recommend(&noisy, &kb).0);
    }
}
