//! The reasoning roles of the loop: Generator, Planner, Optimizer,
//! Diagnoser and Repairer, each a templated prompt plus a validated reply.
//!
//! Replies carry their payload in a fenced block tagged with what it holds
//! (`program`, `plan`, `repair`, `value`); everything outside the block is
//! ignored. A reply that fails validation is retried once with the problem
//! appended to the prompt, then the call degrades (dropped seed, fallback
//! plan, shell-violating candidate) and a fault is reported.

pub mod backend;

use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub use backend::{
    AgentRequest, BackendError, Capabilities, HttpBackend, HttpConfig, OfflineBackend, ReasoningBackend, RecordedCall,
    Role, ScriptedBackend, ScriptedEntry, ScriptedFixture,
};

use crate::decision::MethodRecommendation;
use crate::kb::FALLBACK_MARKER;
use crate::trajectory::{OptimizationContext, PlanNote, RepairContext};

pub mod templates {
    //! Prompt templates, shipped as text assets next to the crate.
    pub const GENERATOR: &str = include_str!("../../prompts/generator.txt");
    pub const PLANNER: &str = include_str!("../../prompts/planner.txt");
    pub const DIAGNOSER: &str = include_str!("../../prompts/diagnoser.txt");
    pub const OPTIMIZER: &str = include_str!("../../prompts/optimizer.txt");
    pub const REPAIRER: &str = include_str!("../../prompts/repairer.txt");
    pub const FEATURE: &str = include_str!("../../prompts/feature.txt");
    pub const RETRY: &str = include_str!("../../prompts/retry.txt");

    pub const ALL: [(&str, &str); 7] = [
        ("generator", GENERATOR),
        ("planner", PLANNER),
        ("diagnoser", DIAGNOSER),
        ("optimizer", OPTIMIZER),
        ("repairer", REPAIRER),
        ("feature", FEATURE),
        ("retry", RETRY),
    ];
}

/// Substitutes `{{name}}` placeholders in one pass over the template, so
/// substituted text is never re-scanned.
///
/// # Panics
/// When the template names a placeholder missing from `vars`; templates are
/// crate assets, so that is a programming error.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").expect("unterminated placeholder in template");
        let name = after[..end].trim();
        let value = vars
            .iter()
            .find(|(k, _)| *k == name)
            .unwrap_or_else(|| panic!("template placeholder {{{{{name}}}}} has no value"))
            .1;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    out
}

/// Placeholder names a template uses, in order of first appearance.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else { break };
        let name = after[..end].trim().to_string();
        if !out.contains(&name) {
            out.push(name);
        }
        rest = &after[end + 2..];
    }
    out
}

/// Contents of the first fenced block tagged `tag`.
pub fn extract_block<'a>(reply: &'a str, tag: &str) -> Option<&'a str> {
    let mut offset = 0;
    let mut open: Option<usize> = None;
    for line in reply.split_inclusive('\n') {
        let trimmed = line.trim();
        match open {
            None => {
                if let Some(rest) = trimmed.strip_prefix("```") {
                    if rest.trim() == tag {
                        open = Some(offset + line.len());
                    }
                }
            }
            Some(start) => {
                if trimmed == "```" {
                    let body = &reply[start..offset];
                    return Some(body.strip_suffix('\n').unwrap_or(body));
                }
            }
        }
        offset += line.len();
    }
    None
}

fn shell_patterns() -> &'static [Regex; 2] {
    static SHELL: OnceLock<[Regex; 2]> = OnceLock::new();
    SHELL.get_or_init(|| {
        [
            Regex::new(r"\bclass\s+ModelNew\b").expect("static regex"),
            Regex::new(r"\bdef\s+forward\s*\(").expect("static regex"),
        ]
    })
}

/// Checks a program against the required shell; `Err` names the violation.
pub fn check_program_shell(source: &str) -> Result<(), String> {
    let [class, forward] = shell_patterns();
    if source.trim().is_empty() {
        return Err("program is empty".into());
    }
    if !class.is_match(source) {
        return Err("program does not define class ModelNew".into());
    }
    if !forward.is_match(source) {
        return Err("program does not define a forward method".into());
    }
    Ok(())
}

fn parse_program(reply: &str) -> Result<String, String> {
    let body = extract_block(reply, "program").ok_or("reply has no ```program block")?;
    check_program_shell(body)?;
    Ok(body.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProducedBy {
    Generator,
    Optimizer,
    Repairer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelCandidate {
    pub kernel_id: String,
    pub source: String,
    pub parent_id: Option<String>,
    pub produced_by: ProducedBy,
    /// 0 for seeds.
    pub round_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub target_method: String,
    pub steps: Vec<String>,
    #[serde(default)]
    pub rationale: String,
}

impl PlanDocument {
    pub fn is_fallback(&self) -> bool {
        self.target_method == FALLBACK_MARKER
    }

    pub fn note(&self) -> PlanNote {
        PlanNote {
            label: self.target_method.clone(),
            summary: self.steps.join("; "),
            reference: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairPlan {
    pub suspected_root_cause: String,
    pub steps: Vec<String>,
    /// Earlier edits of the open chain that did not fix the kernel.
    pub avoid_list: Vec<String>,
}

impl RepairPlan {
    pub fn note(&self) -> PlanNote {
        PlanNote {
            label: "repair".into(),
            summary: format!("{}: {}", self.suspected_root_cause, self.steps.join("; ")),
            reference: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// The reply could not be parsed or broke the program shell.
    MalformedResponse,
    /// The plan named a method outside the recommended set.
    PlanValidation,
}

/// A degraded agent call, kept in the session log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentFault {
    pub role: Role,
    pub kind: FaultKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<String>,
    pub detail: String,
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub(crate) struct Rejection<T> {
    problem: String,
    kind: FaultKind,
    salvage: Option<T>,
}

impl<T> Rejection<T> {
    pub(crate) fn malformed(problem: impl Into<String>) -> Self {
        Rejection {
            problem: problem.into(),
            kind: FaultKind::MalformedResponse,
            salvage: None,
        }
    }
}

pub(crate) enum Answer<T> {
    Accepted(T),
    Rejected {
        fault: AgentFault,
        salvage: Option<T>,
        last_problem: String,
        last_reply: String,
    },
}

/// One call plus at most one validation retry.
pub(crate) fn ask<T>(
    backend: &mut dyn ReasoningBackend,
    role: Role,
    round: Option<u32>,
    slot: Option<&str>,
    prompt: &str,
    parse: impl Fn(&str) -> Result<T, Rejection<T>>,
) -> Result<Answer<T>, BackendError> {
    let mut request = AgentRequest {
        role,
        prompt: prompt.to_string(),
        round,
        slot: slot.map(str::to_string),
        attempt: 1,
    };
    let mut problems = Vec::new();
    let mut salvage = None;
    let mut kind = FaultKind::MalformedResponse;
    let mut last_reply = String::new();
    for attempt in 1..=2u32 {
        request.attempt = attempt;
        let reply = backend.complete(&request)?;
        match parse(&reply) {
            Ok(v) => return Ok(Answer::Accepted(v)),
            Err(r) => {
                request.prompt = format!("{prompt}{}", fill(templates::RETRY, &[("problem", &r.problem)]));
                problems.push(r.problem);
                kind = r.kind;
                if r.salvage.is_some() {
                    salvage = r.salvage;
                }
                last_reply = reply;
            }
        }
    }
    let last_problem = problems.last().cloned().unwrap_or_default();
    Ok(Answer::Rejected {
        fault: AgentFault {
            role,
            kind,
            slot: slot.map(str::to_string),
            detail: problems.join("; then: "),
        },
        salvage,
        last_problem,
        last_reply,
    })
}

pub fn render_generator_prompt(reference_program: &str, slot: &str) -> String {
    fill(templates::GENERATOR, &[("reference", reference_program.trim_end()), ("slot", slot)])
}

/// Seeds that survived validation, plus reports for the dropped ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedBatch {
    pub candidates: Vec<KernelCandidate>,
    pub faults: Vec<AgentFault>,
}

/// Samples `n` correctness-focused rewrites of the reference program as
/// `seed0..seed{n-1}`; malformed seeds are dropped and reported.
pub fn generate_seeds(
    backend: &mut dyn ReasoningBackend,
    reference_program: &str,
    n: usize,
) -> Result<SeedBatch, AgentError> {
    let mut batch = SeedBatch {
        candidates: Vec::new(),
        faults: Vec::new(),
    };
    for i in 0..n {
        let slot = format!("seed{i}");
        let prompt = render_generator_prompt(reference_program, &slot);
        match ask(backend, Role::Generator, Some(0), Some(&slot), &prompt, |r| {
            parse_program(r).map_err(Rejection::malformed)
        })? {
            Answer::Accepted(source) => batch.candidates.push(KernelCandidate {
                kernel_id: slot,
                source,
                parent_id: None,
                produced_by: ProducedBy::Generator,
                round_index: 0,
            }),
            Answer::Rejected { fault, .. } => batch.faults.push(fault),
        }
    }
    Ok(batch)
}

fn render_method_section(rec: &MethodRecommendation) -> String {
    if rec.fallback {
        return format!(
            "No knowledge-base method applies to this kernel. Plan from the profiling evidence \
             alone and set `target_method` to \"{FALLBACK_MARKER}\"."
        );
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Diagnosed bottleneck: {} (decision case {}).",
        rec.bottleneck_type.as_deref().unwrap_or("unknown"),
        rec.matched_case.as_deref().unwrap_or("unknown")
    );
    let _ = writeln!(
        out,
        "Recommended methods; `target_method` must be one of: {}.",
        rec.method_ids().join(", ")
    );
    for m in &rec.methods {
        let k = &m.knowledge;
        let _ = writeln!(out, "\n### {}\nRationale: {}", m.method_id, k.rationale);
        let _ = writeln!(out, "Implementation cues:");
        for cue in &k.implementation_cues {
            let _ = writeln!(out, "- {cue}");
        }
        if !k.expected_benefit.is_empty() {
            let _ = writeln!(out, "Expected benefit: {}", k.expected_benefit);
        }
        if !k.preconditions_note.is_empty() {
            let _ = writeln!(out, "Preconditions: {}", k.preconditions_note);
        }
    }
    out.trim_end().to_string()
}

pub fn render_planner_prompt(
    rec: &MethodRecommendation,
    profile_feedback: &str,
    context: &OptimizationContext,
    base: &KernelCandidate,
) -> String {
    let feedback = if profile_feedback.trim().is_empty() {
        "(no profiling feedback available)"
    } else {
        profile_feedback.trim_end()
    };
    fill(
        templates::PLANNER,
        &[
            ("method_section", &render_method_section(rec)),
            ("profile_feedback", feedback),
            ("optimization_context", context.render().trim_end()),
            ("base_id", &base.kernel_id),
            ("base_source", base.source.trim_end()),
        ],
    )
}

fn parse_plan(reply: &str, rec: &MethodRecommendation) -> Result<PlanDocument, Rejection<PlanDocument>> {
    let body = extract_block(reply, "plan").ok_or_else(|| Rejection::malformed("reply has no ```plan block"))?;
    let plan: PlanDocument =
        serde_json::from_str(body).map_err(|e| Rejection::malformed(format!("plan is not valid JSON: {e}")))?;
    let steps_ok = !plan.steps.is_empty() && plan.steps.iter().all(|s| !s.trim().is_empty());
    if !steps_ok {
        return Err(Rejection::malformed("plan has no steps"));
    }
    let allowed = if rec.fallback {
        plan.is_fallback()
    } else {
        rec.method_ids().contains(&plan.target_method.as_str())
    };
    if allowed {
        return Ok(plan);
    }
    let expected = if rec.fallback {
        format!("\"{FALLBACK_MARKER}\"")
    } else {
        rec.method_ids().join(", ")
    };
    Err(Rejection {
        problem: format!("target_method {:?} is not one of {expected}", plan.target_method),
        kind: FaultKind::PlanValidation,
        salvage: Some(plan),
    })
}

/// Asks the Planner for a one-method plan. A plan that names a method outside
/// the recommendation twice comes back marked as fallback, with a fault.
pub fn plan_optimization(
    backend: &mut dyn ReasoningBackend,
    round: u32,
    rec: &MethodRecommendation,
    profile_feedback: &str,
    context: &OptimizationContext,
    base: &KernelCandidate,
) -> Result<(PlanDocument, Option<AgentFault>), AgentError> {
    let prompt = render_planner_prompt(rec, profile_feedback, context, base);
    Ok(
        match ask(backend, Role::Planner, Some(round), None, &prompt, |r| parse_plan(r, rec))? {
            Answer::Accepted(plan) => (plan, None),
            Answer::Rejected { fault, salvage, .. } => {
                let plan = match salvage {
                    Some(p) => PlanDocument {
                        target_method: FALLBACK_MARKER.into(),
                        ..p
                    },
                    None => PlanDocument {
                        target_method: FALLBACK_MARKER.into(),
                        steps: vec!["Optimize the base kernel using the profiling evidence alone.".into()],
                        rationale: "the planner reply could not be used".into(),
                    },
                };
                (plan, Some(fault))
            }
        },
    )
}

fn bullet_list(items: &[String]) -> String {
    if items.is_empty() {
        return "(none)".into();
    }
    items.iter().map(|i| format!("- {i}")).collect::<Vec<_>>().join("\n")
}

fn numbered(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

fn or_none(text: &str) -> &str {
    if text.trim().is_empty() {
        "(none)"
    } else {
        text.trim_end()
    }
}

pub fn render_diagnoser_prompt(
    compile_feedback: &str,
    verify_feedback: &str,
    context: &RepairContext,
    latest: &KernelCandidate,
) -> String {
    fill(
        templates::DIAGNOSER,
        &[
            ("compile_feedback", or_none(compile_feedback)),
            ("verify_feedback", or_none(verify_feedback)),
            ("repair_context", context.render().trim_end()),
            ("avoid_list", &bullet_list(&context.failed_attempts())),
            ("kernel_id", &latest.kernel_id),
            ("kernel_source", latest.source.trim_end()),
        ],
    )
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RepairReply {
    suspected_root_cause: String,
    steps: Vec<String>,
}

/// Asks the Diagnoser for a root cause and repair steps for the chain tail.
/// The avoid list always comes from the chain's memory, not from the reply.
pub fn diagnose(
    backend: &mut dyn ReasoningBackend,
    round: u32,
    compile_feedback: &str,
    verify_feedback: &str,
    context: &RepairContext,
    latest: &KernelCandidate,
) -> Result<(RepairPlan, Option<AgentFault>), AgentError> {
    let prompt = render_diagnoser_prompt(compile_feedback, verify_feedback, context, latest);
    let avoid_list = context.failed_attempts();
    let answer = ask(backend, Role::Diagnoser, Some(round), None, &prompt, |r| {
        let body = extract_block(r, "repair").ok_or_else(|| Rejection::malformed("reply has no ```repair block"))?;
        let reply: RepairReply =
            serde_json::from_str(body).map_err(|e| Rejection::malformed(format!("repair plan is not valid JSON: {e}")))?;
        if reply.steps.is_empty() || reply.steps.iter().any(|s| s.trim().is_empty()) {
            return Err(Rejection::malformed("repair plan has no steps"));
        }
        Ok(reply)
    })?;
    Ok(match answer {
        Answer::Accepted(r) => (
            RepairPlan {
                suspected_root_cause: r.suspected_root_cause,
                steps: r.steps,
                avoid_list,
            },
            None,
        ),
        Answer::Rejected { fault, .. } => {
            let first_line = [compile_feedback, verify_feedback]
                .iter()
                .find_map(|f| f.lines().find(|l| !l.trim().is_empty()))
                .unwrap_or("the reported failure")
                .trim()
                .to_string();
            (
                RepairPlan {
                    suspected_root_cause: "undiagnosed".into(),
                    steps: vec![format!("Fix the reported error: {first_line}")],
                    avoid_list,
                },
                Some(fault),
            )
        }
    })
}

/// An edited program. When the reply broke the program shell twice the
/// candidate still exists (so lineage and memory stay complete) but carries
/// the violation and must be recorded as a compile failure, not evaluated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub candidate: KernelCandidate,
    pub shell_violation: Option<String>,
    pub fault: Option<AgentFault>,
}

fn edit(
    backend: &mut dyn ReasoningBackend,
    role: Role,
    round: u32,
    prompt: &str,
    parent: &KernelCandidate,
    new_id: &str,
) -> Result<Edit, AgentError> {
    let produced_by = match role {
        Role::Repairer => ProducedBy::Repairer,
        _ => ProducedBy::Optimizer,
    };
    let mut candidate = KernelCandidate {
        kernel_id: new_id.to_string(),
        source: String::new(),
        parent_id: Some(parent.kernel_id.clone()),
        produced_by,
        round_index: round,
    };
    Ok(
        match ask(backend, role, Some(round), None, prompt, |r| parse_program(r).map_err(Rejection::malformed))? {
            Answer::Accepted(source) => {
                candidate.source = source;
                Edit {
                    candidate,
                    shell_violation: None,
                    fault: None,
                }
            }
            Answer::Rejected {
                fault,
                last_problem,
                last_reply,
                ..
            } => {
                candidate.source = extract_block(&last_reply, "program").unwrap_or(&last_reply).to_string();
                Edit {
                    candidate,
                    shell_violation: Some(last_problem),
                    fault: Some(fault),
                }
            }
        },
    )
}

pub fn render_optimizer_prompt(plan: &PlanDocument, base: &KernelCandidate) -> String {
    fill(
        templates::OPTIMIZER,
        &[
            ("target_method", &plan.target_method),
            ("rationale", or_none(&plan.rationale)),
            ("steps", &numbered(&plan.steps)),
            ("base_id", &base.kernel_id),
            ("base_source", base.source.trim_end()),
        ],
    )
}

/// Applies a plan to the base kernel, producing child `new_id`.
pub fn apply_optimization(
    backend: &mut dyn ReasoningBackend,
    round: u32,
    plan: &PlanDocument,
    base: &KernelCandidate,
    new_id: &str,
) -> Result<Edit, AgentError> {
    let prompt = render_optimizer_prompt(plan, base);
    edit(backend, Role::Optimizer, round, &prompt, base, new_id)
}

pub fn render_repairer_prompt(plan: &RepairPlan, latest: &KernelCandidate) -> String {
    fill(
        templates::REPAIRER,
        &[
            ("root_cause", or_none(&plan.suspected_root_cause)),
            ("steps", &numbered(&plan.steps)),
            ("avoid_list", &bullet_list(&plan.avoid_list)),
            ("kernel_id", &latest.kernel_id),
            ("kernel_source", latest.source.trim_end()),
        ],
    )
}

/// Applies repair steps to the chain tail, producing child `new_id`.
pub fn apply_repair(
    backend: &mut dyn ReasoningBackend,
    round: u32,
    plan: &RepairPlan,
    latest: &KernelCandidate,
    new_id: &str,
) -> Result<Edit, AgentError> {
    let prompt = render_repairer_prompt(plan, latest);
    edit(backend, Role::Repairer, round, &prompt, latest, new_id)
}
