//! End-to-end sessions over the scripted scenario fixtures: hand-traced
//! golden outcomes, byte-identical logs, resume and replay.

mod support;

use kerntune_core::orchestrator::{replay_from_logs, RunControl, SessionLog, SessionOutcome};
use support::{golden_mismatches, load_kb, run_scenario, scenario_dirs, snapshot};

#[test]
fn hand_traced_scenarios_match() {
    let kb = load_kb("kb");
    let dirs: Vec<_> = scenario_dirs().into_iter().filter(|d| d.join("expected.json").is_file()).collect();
    assert!(dirs.len() >= 5);
    let mut failures = Vec::new();
    for dir in &dirs {
        let tmp = tempfile::tempdir().unwrap();
        let run = run_scenario(dir, &kb, Some(tmp.path()), RunControl::default(), false);
        for m in golden_mismatches(dir, &run, tmp.path()) {
            failures.push(format!("{}: {m}", dir.file_name().unwrap().to_string_lossy()));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn logs_are_byte_identical_across_runs() {
    let kb = load_kb("kb");
    for dir in scenario_dirs() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_scenario(&dir, &kb, Some(a.path()), RunControl::default(), false);
        run_scenario(&dir, &kb, Some(b.path()), RunControl::default(), false);
        assert_eq!(snapshot(a.path()), snapshot(b.path()), "{}", dir.display());
    }
}

#[test]
fn resume_at_every_boundary_reproduces_the_final_state() {
    let kb = load_kb("kb");
    for dir in scenario_dirs() {
        let full = tempfile::tempdir().unwrap();
        let reference = run_scenario(&dir, &kb, Some(full.path()), RunControl::default(), false);
        let rounds = reference.outcome.clone().completed().unwrap().rounds_used;
        let want = snapshot(full.path());
        for stop in 0..rounds {
            let tmp = tempfile::tempdir().unwrap();
            let first = run_scenario(&dir, &kb, Some(tmp.path()), RunControl { stop_after: Some(stop) }, false);
            assert_eq!(first.outcome, SessionOutcome::Interrupted { after_round: stop });
            let second = run_scenario(&dir, &kb, Some(tmp.path()), RunControl::default(), true);
            assert_eq!(second.outcome, reference.outcome, "{} stopped after {stop}", dir.display());
            assert_eq!(snapshot(tmp.path()), want, "{} stopped after {stop}", dir.display());
        }
    }
}

#[test]
fn replay_rebuilds_the_checkpoint() {
    let kb = load_kb("kb");
    for dir in scenario_dirs() {
        let tmp = tempfile::tempdir().unwrap();
        let run = run_scenario(&dir, &kb, Some(tmp.path()), RunControl::default(), false);
        let report = replay_from_logs(tmp.path()).unwrap();
        assert!(report.consistent(), "{}: {report:?}", dir.display());
        assert_eq!(report.state, run.outcome.completed().unwrap().state);
    }
}

#[test]
fn tampered_log_is_detected_on_replay() {
    let kb = load_kb("kb");
    let dir = &scenario_dirs()[0];
    let tmp = tempfile::tempdir().unwrap();
    run_scenario(dir, &kb, Some(tmp.path()), RunControl::default(), false);
    let log = SessionLog::open(tmp.path()).unwrap();
    let mut rounds = log.read_rounds().unwrap();
    let last = rounds.last_mut().unwrap();
    last.record.compile.feedback.push_str(" (edited)");
    log.write_round(last).unwrap();
    let report = replay_from_logs(tmp.path()).unwrap();
    assert!(!report.consistent());
    assert!(report.differences.contains(&"rounds".to_string()));
}

#[test]
fn existing_session_is_not_overwritten_and_kb_changes_block_resume() {
    let kb = load_kb("kb");
    let dir = &scenario_dirs()[0];
    let tmp = tempfile::tempdir().unwrap();
    run_scenario(dir, &kb, Some(tmp.path()), RunControl { stop_after: Some(1) }, false);
    let scenario = kerntune_core::orchestrator::scenario::Scenario::load(dir).unwrap();
    let (mut a, mut e) = (scenario.agents().unwrap(), scenario.evaluator().unwrap());
    let mut w = kerntune_core::orchestrator::Workers { agents: &mut a, evaluator: &mut e };
    let again = kerntune_core::orchestrator::run_session(&scenario.task, &scenario.config, &kb, &mut w, Some(tmp.path()), RunControl::default());
    assert!(again.is_err());
    let other = load_kb("fixtures/kbs/dense");
    let resumed = kerntune_core::orchestrator::resume_session(tmp.path(), &other, &mut w, RunControl::default());
    assert!(matches!(resumed, Err(kerntune_core::orchestrator::SessionFault::Resume(_))));
}
