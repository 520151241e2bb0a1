//! Agent operations against the scripted backend, prompt-content contracts,
//! and the HTTP backend against a local mock server.

mod support;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use kerntune_core::agents::{
    self, apply_optimization, apply_repair, diagnose, generate_seeds, plan_optimization, AgentRequest, BackendError,
    FaultKind, HttpBackend, HttpConfig, KernelCandidate, PlanDocument, ProducedBy, ReasoningBackend, Role,
    ScriptedBackend, ScriptedEntry, ScriptedFixture,
};
use kerntune_core::decision::{MethodRecommendation, RecommendedMethod};
use kerntune_core::kb::FALLBACK_MARKER;
use kerntune_core::trajectory::{Branch, CheckOutcome, PlanNote, RoundRecord, SessionState};
use support::load_kb;

const REFERENCE: &str = "import torch\n\nclass Model(torch.nn.Module):\n    def forward(self, a, b):\n        return a + b\n";

fn program(tag: &str) -> String {
    format!(
        "class ModelNew(torch.nn.Module):\n    # {tag}\n    def forward(self, a, b):\n        return ext.add(a, b)"
    )
}

fn reply(block: &str, body: &str) -> String {
    format!("Here you go.\n```{block}\n{body}\n```\nDone.")
}

fn scripted(entries: Vec<ScriptedEntry>) -> ScriptedBackend {
    ScriptedBackend::new(ScriptedFixture {
        model: "scripted".into(),
        responses: entries,
    })
    .unwrap()
}

fn say(role: Role, slot: Option<&str>, attempt: Option<u32>, text: String) -> ScriptedEntry {
    ScriptedEntry {
        role,
        prompt_sha256: None,
        round: None,
        slot: slot.map(str::to_string),
        attempt,
        response: Some(text),
        response_file: None,
    }
}

fn candidate(id: &str) -> KernelCandidate {
    KernelCandidate {
        kernel_id: id.into(),
        source: program(id),
        parent_id: None,
        produced_by: ProducedBy::Generator,
        round_index: 0,
    }
}

fn recommendation(ids: &[&str]) -> MethodRecommendation {
    let kb = load_kb("kb");
    MethodRecommendation {
        methods: ids
            .iter()
            .map(|id| RecommendedMethod {
                method_id: id.to_string(),
                knowledge: kb.method(id).unwrap().clone(),
            })
            .collect(),
        bottleneck_type: Some("memory_bandwidth_bound".into()),
        matched_case: Some("mbw_untiled".into()),
        fallback: false,
    }
}

#[test]
fn three_canned_seeds() {
    let mut b = scripted(
        (0..3)
            .map(|i| {
                let slot = format!("seed{i}");
                say(Role::Generator, Some(&slot), None, reply("program", &program(&slot)))
            })
            .collect(),
    );
    let batch = generate_seeds(&mut b, REFERENCE, 3).unwrap();
    let ids: Vec<&str> = batch.candidates.iter().map(|c| c.kernel_id.as_str()).collect();
    assert_eq!(ids, ["seed0", "seed1", "seed2"]);
    assert!(batch.faults.is_empty());
    assert!(batch
        .candidates
        .iter()
        .all(|c| c.produced_by == ProducedBy::Generator && c.parent_id.is_none()));
    assert_eq!(batch.candidates[1].source, program("seed1"));

    let single = generate_seeds(&mut b, REFERENCE, 1).unwrap();
    assert_eq!(single.candidates.len(), 1);
}

#[test]
fn malformed_seed_is_dropped_and_reported() {
    let mut b = scripted(vec![
        say(Role::Generator, None, None, reply("program", &program("ok"))),
        say(Role::Generator, Some("seed1"), None, "I could not do it.".into()),
    ]);
    let batch = generate_seeds(&mut b, REFERENCE, 3).unwrap();
    assert_eq!(batch.candidates.len(), 2);
    assert_eq!(batch.faults.len(), 1);
    assert_eq!(batch.faults[0].slot.as_deref(), Some("seed1"));
    assert_eq!(batch.faults[0].kind, FaultKind::MalformedResponse);
    // The malformed seed was retried once, with the problem spelled out.
    let seed1: Vec<_> = b.calls().iter().filter(|c| c.slot.as_deref() == Some("seed1")).collect();
    assert_eq!(seed1.len(), 2);
    assert!(seed1[1].prompt.contains("could not be used"));
}

#[test]
fn generator_prompt_has_no_performance_directives() {
    let prompt = agents::render_generator_prompt(REFERENCE, "seed0");
    let lower = prompt.to_lowercase();
    for word in [
        "fast", "speed", "perform", "optimi", "latency", "throughput", "efficien", "quick", "tun",
    ] {
        assert!(!lower.contains(word), "generator prompt mentions {word:?}");
    }
    assert!(prompt.contains(REFERENCE.trim_end()) && lower.contains("correct"));
}

#[test]
fn planner_targets_a_recommended_method() {
    let rec = recommendation(&["shared_memory_tiling", "vectorize_global_loads"]);
    let plan = r#"{"target_method": "shared_memory_tiling", "steps": ["stage tiles of A and B"], "rationale": "reuse"}"#;
    let mut b = scripted(vec![say(Role::Planner, None, None, reply("plan", plan))]);
    let state = SessionState::new(0.3, 0.3);
    let (doc, fault) =
        plan_optimization(&mut b, 1, &rec, "dram 90%", &state.optimization_context(), &candidate("seed0")).unwrap();
    assert!(fault.is_none());
    assert_eq!(doc.target_method, "shared_memory_tiling");
    assert_eq!(b.calls().len(), 1);
}

#[test]
fn unrecommended_method_twice_becomes_fallback() {
    let rec = recommendation(&["shared_memory_tiling"]);
    let plan = r#"{"target_method": "tensor_core_gemm", "steps": ["use wmma"], "rationale": "x"}"#;
    let mut b = scripted(vec![say(Role::Planner, None, None, reply("plan", plan))]);
    let ctx = SessionState::new(0.3, 0.3).optimization_context();
    let (doc, fault) = plan_optimization(&mut b, 1, &rec, "", &ctx, &candidate("seed0")).unwrap();
    assert_eq!(doc.target_method, FALLBACK_MARKER);
    assert_eq!(doc.steps, ["use wmma"]);
    assert_eq!(fault.unwrap().kind, FaultKind::PlanValidation);
    assert_eq!(b.calls().len(), 2);
}

#[test]
fn fallback_recommendation_accepts_fallback_plan() {
    let plan = format!(r#"{{"target_method": "{FALLBACK_MARKER}", "steps": ["fuse the two kernels"]}}"#);
    let mut b = scripted(vec![say(Role::Planner, None, None, reply("plan", &plan))]);
    let ctx = SessionState::new(0.3, 0.3).optimization_context();
    let (doc, fault) =
        plan_optimization(&mut b, 4, &MethodRecommendation::fallback(), "raw", &ctx, &candidate("k3")).unwrap();
    assert!(fault.is_none() && doc.is_fallback());
    assert!(b.calls()[0].prompt.contains("No knowledge-base method applies"));
}

fn passing_round(state: &SessionState, kernel: &str, method: &str, speedup: f64) -> RoundRecord {
    RoundRecord {
        round_index: state.round_counter + 1,
        branch: state.next_branch(),
        plan: Some(PlanNote {
            label: method.into(),
            summary: format!("apply {method} carefully"),
            reference: None,
        }),
        kernel_id: Some(kernel.into()),
        compile: CheckOutcome::pass("ok"),
        verify: CheckOutcome::pass("ok"),
        profile: Some(kerntune_core::trajectory::ProfileSummary {
            speedup,
            mean_latency_ms: 1.0 / speedup,
            feedback: String::new(),
        }),
        base_id_at_time: state.base_kernel_id.clone(),
    }
}

fn failing_round(state: &SessionState, kernel: &str, label: &str, compile_error: &str) -> RoundRecord {
    RoundRecord {
        round_index: state.round_counter + 1,
        branch: state.next_branch(),
        plan: Some(PlanNote {
            label: label.into(),
            summary: format!("{label} edit"),
            reference: None,
        }),
        kernel_id: Some(kernel.into()),
        compile: CheckOutcome::fail(compile_error),
        verify: CheckOutcome::skipped(),
        profile: None,
        base_id_at_time: state.base_kernel_id.clone(),
    }
}

#[test]
fn planner_prompt_contains_every_context_entry_and_method_knowledge() {
    let mut s = SessionState::new(0.3, 0.3);
    s.start_from_seed("seed0", CheckOutcome::pass(""), CheckOutcome::pass(""), Some(1.0));
    let r = passing_round(&s, "k1", "operator_fusion", 1.1);
    s.record_round(r).unwrap();
    let r = passing_round(&s, "k2", "memory_access_coalescing", 1.2);
    s.record_round(r).unwrap();
    let r = failing_round(&s, "k3", "vectorize_global_loads", "error: float4 misaligned");
    s.record_round(r).unwrap();
    let ctx = s.optimization_context();
    assert_eq!(ctx.entries.len(), 3);

    let kb = load_kb("kb");
    let rec = recommendation(&["shared_memory_tiling", "vectorize_global_loads"]);
    let prompt = agents::render_planner_prompt(&rec, "dram__throughput 91%", &ctx, &candidate("seed0"));
    for line in ctx.render().lines() {
        assert!(prompt.contains(line), "missing context line {line:?}");
    }
    for id in ["shared_memory_tiling", "vectorize_global_loads"] {
        let m = kb.method(id).unwrap();
        assert!(prompt.contains(&m.rationale));
        for cue in &m.implementation_cues {
            assert!(prompt.contains(cue.as_str()));
        }
    }
    assert!(prompt.contains("dram__throughput 91%"));
    assert!(prompt.contains(&program("seed0")));
}

fn chain_with_two_failed_attempts() -> SessionState {
    let mut s = SessionState::new(0.3, 0.3);
    s.start_from_seed("seed0", CheckOutcome::pass(""), CheckOutcome::pass(""), Some(1.0));
    let r = failing_round(&s, "k1", "shared_memory_tiling", "error: identifier \"TILE\" is undefined");
    s.record_round(r).unwrap();
    assert_eq!(s.next_branch(), Branch::Repair);
    let r = failing_round(&s, "k2", "repair", "error: expected a \";\"");
    s.record_round(r).unwrap();
    let r = failing_round(&s, "k3", "repair", "error: too many resources requested for launch");
    s.record_round(r).unwrap();
    s
}

#[test]
fn diagnoser_sees_whole_chain_and_gets_avoid_list() {
    let s = chain_with_two_failed_attempts();
    let ctx = s.repair_context().unwrap();
    assert_eq!(ctx.attempts.len(), 2);
    let repair = r#"{"suspected_root_cause": "TILE macro lost", "steps": ["re-add #define TILE 32"]}"#;
    let mut b = scripted(vec![say(Role::Diagnoser, None, None, reply("repair", repair))]);
    let (plan, fault) = diagnose(&mut b, 4, "error: launch failed", "", &ctx, &candidate("k3")).unwrap();
    assert!(fault.is_none());
    assert_eq!(plan.suspected_root_cause, "TILE macro lost");
    assert_eq!(plan.steps, ["re-add #define TILE 32"]);
    assert_eq!(plan.avoid_list.len(), 2);
    assert_eq!(plan.avoid_list, ctx.failed_attempts());
    let prompt = &b.calls()[0].prompt;
    for attempt in &ctx.attempts {
        assert!(prompt.contains(attempt.kernel_id.as_deref().unwrap()));
        assert!(prompt.contains(&attempt.compile.feedback));
    }
    for avoided in &plan.avoid_list {
        assert!(prompt.contains(avoided.as_str()));
    }
}

#[test]
fn first_failure_has_empty_avoid_list() {
    let mut s = SessionState::new(0.3, 0.3);
    s.start_from_seed("seed0", CheckOutcome::pass(""), CheckOutcome::pass(""), Some(1.0));
    let r = failing_round(&s, "k1", "operator_fusion", "error: x");
    s.record_round(r).unwrap();
    let ctx = s.repair_context().unwrap();
    let mut b = scripted(vec![say(
        Role::Diagnoser,
        None,
        None,
        reply("repair", r#"{"suspected_root_cause": "typo", "steps": ["fix it"]}"#),
    )]);
    let (plan, _) = diagnose(&mut b, 2, "error: x", "", &ctx, &candidate("k1")).unwrap();
    assert!(plan.avoid_list.is_empty());
}

#[test]
fn optimizer_keeps_lineage_and_checks_the_shell() {
    let plan = PlanDocument {
        target_method: "operator_fusion".into(),
        steps: vec!["fuse add and relu".into()],
        rationale: "fewer launches".into(),
    };
    let base = candidate("seed1");
    let mut b = scripted(vec![say(Role::Optimizer, None, None, reply("program", &program("fused")))]);
    let edit = apply_optimization(&mut b, 3, &plan, &base, "k3").unwrap();
    assert_eq!(edit.candidate.parent_id.as_deref(), Some("seed1"));
    assert_eq!(edit.candidate.produced_by, ProducedBy::Optimizer);
    assert_eq!(edit.candidate.source, program("fused"));
    assert_eq!((edit.candidate.kernel_id.as_str(), edit.candidate.round_index), ("k3", 3));
    assert!(edit.shell_violation.is_none());
    assert!(b.calls()[0].prompt.contains("1. fuse add and relu"));

    let no_forward = "class ModelNew(torch.nn.Module):\n    pass";
    let mut b = scripted(vec![say(Role::Optimizer, None, None, reply("program", no_forward))]);
    let edit = apply_optimization(&mut b, 3, &plan, &base, "k3").unwrap();
    assert_eq!(edit.shell_violation.as_deref(), Some("program does not define a forward method"));
    assert_eq!(edit.candidate.parent_id.as_deref(), Some("seed1"));
    assert_eq!(edit.candidate.source, no_forward);
    assert_eq!(edit.fault.unwrap().kind, FaultKind::MalformedResponse);
}

#[test]
fn repairer_edits_the_chain_tail() {
    let s = chain_with_two_failed_attempts();
    let tail = s.open_chain().unwrap().tail_kernel_id().to_string();
    assert_eq!(tail, "k3");
    let plan = kerntune_core::agents::RepairPlan {
        suspected_root_cause: "resources".into(),
        steps: vec!["lower block size to 128".into()],
        avoid_list: s.repair_context().unwrap().failed_attempts(),
    };
    let mut b = scripted(vec![say(Role::Repairer, None, None, reply("program", &program("k4")))]);
    let edit = apply_repair(&mut b, 4, &plan, &candidate(&tail), "k4").unwrap();
    assert_eq!(edit.candidate.parent_id.as_deref(), Some("k3"));
    assert_eq!(edit.candidate.produced_by, ProducedBy::Repairer);
    assert!(edit.shell_violation.is_none());
    for avoided in &plan.avoid_list {
        assert!(b.calls()[0].prompt.contains(avoided.as_str()));
    }

    let mut b = scripted(vec![say(Role::Repairer, None, None, "no code today".into())]);
    let edit = apply_repair(&mut b, 4, &plan, &candidate(&tail), "k4").unwrap();
    assert_eq!(edit.shell_violation.as_deref(), Some("reply has no ```program block"));
    assert_eq!(edit.candidate.parent_id.as_deref(), Some("k3"));
}

#[test]
fn every_template_renders_without_leftover_placeholders() {
    for (name, template) in agents::templates::ALL {
        let names = agents::placeholders(template);
        let vars: Vec<(&str, &str)> = names.iter().map(|n| (n.as_str(), "X")).collect();
        let rendered = agents::fill(template, &vars);
        assert!(!rendered.contains("{{"), "{name} has leftover placeholders");
    }
}

/// Serves canned HTTP responses, one per connection, and hands back the
/// raw requests it saw.
fn mock_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut body_in = vec![0u8; length];
            reader.read_exact(&mut body_in).unwrap();
            head.push_str(&String::from_utf8(body_in).unwrap());
            seen.push(head);
            let out = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(out.as_bytes()).unwrap();
        }
        seen
    });
    (format!("http://{addr}/v1/chat/completions"), handle)
}

fn http_config(endpoint: String) -> HttpConfig {
    HttpConfig::from_lookup(|k| match k {
        "KERNTUNE_LLM_ENDPOINT" => Some(endpoint.clone()),
        "KERNTUNE_LLM_API_KEY" => Some("secret-token".into()),
        "KERNTUNE_LLM_MODEL" => Some("test-model".into()),
        _ => None,
    })
    .unwrap()
}

#[test]
fn http_backend_speaks_chat_completions() {
    let ok = r#"{"choices":[{"message":{"role":"assistant","content":"```value\ncoalesced\n```"}}]}"#;
    let (endpoint, server) = mock_server(vec![
        (200, ok.into()),
        (503, r#"{"error":"overloaded"}"#.into()),
        (200, r#"{"unexpected":true}"#.into()),
    ]);
    let mut backend = HttpBackend::new(http_config(endpoint));
    assert_eq!(backend.capabilities().temperature, 1.0);
    assert_eq!(backend.capabilities().model, "test-model");
    let req = AgentRequest {
        role: Role::FeatureExtractor,
        prompt: "classify this".into(),
        round: None,
        slot: None,
        attempt: 1,
    };
    assert_eq!(backend.complete(&req).unwrap(), "```value\ncoalesced\n```");
    assert!(matches!(backend.complete(&req), Err(BackendError::Unavailable(_))));
    assert!(matches!(backend.complete(&req), Err(BackendError::Protocol(_))));

    let seen = server.join().unwrap();
    let first = &seen[0];
    assert!(first.starts_with("POST /v1/chat/completions"));
    assert!(first.to_ascii_lowercase().contains("authorization: bearer secret-token"));
    let body: serde_json::Value = serde_json::from_str(&first[first.find("\r\n\r\n").unwrap() + 4..]).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 1.0);
    assert_eq!(body["messages"][1]["content"], "classify this");
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut backend = HttpBackend::new(http_config(format!("http://127.0.0.1:{port}/v1/chat/completions")));
    let req = AgentRequest {
        role: Role::Planner,
        prompt: "p".into(),
        round: Some(1),
        slot: None,
        attempt: 1,
    };
    assert!(matches!(backend.complete(&req), Err(BackendError::Unavailable(_))));
}
