//! The session loop: seed generation and selection, then a fixed budget of
//! rounds that either repair the open chain or optimize the base kernel,
//! with every outcome written to the trajectory memory and the session log.
//!
//! Agent and evaluation problems inside a round become failed rounds; only a
//! vanished evaluator (or an unwritable log) aborts a session.

pub mod harness;
pub mod logs;
pub mod metrics;
pub mod scenario;
pub mod scripted;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{self, AgentFault, KernelCandidate, PlanDocument, ReasoningBackend, RepairPlan};
use crate::decision::{recommend, DecisionTrace, EvidenceBundle, MethodRecommendation};
use crate::features::{self, FeatureError, FeatureExtraction};
use crate::kb::KnowledgeBase;
use crate::profiling::{compute_speedup, RawProfile, RunFeatures, TimingResult};
use crate::trajectory::{
    Branch, CheckOutcome, MemoryError, ProfileSummary, PromotionDecision, RoundRecord, SessionState,
};

pub use logs::{replay_from_logs, ReplayReport, SessionLog};
pub use metrics::{compute_metrics, metrics_by_level, MetricsReport, TaskOutcome};

/// Compile, verify and (when both pass) timing and profiler output for one
/// candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewerResult {
    pub compiled: CheckOutcome,
    pub correct: CheckOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_latency_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_profile: Option<RawProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_features: Option<RunFeatures>,
}

impl ReviewerResult {
    pub fn failed_compile(log: impl Into<String>) -> Self {
        ReviewerResult {
            compiled: CheckOutcome::fail(log),
            correct: CheckOutcome::skipped(),
            timing: None,
            baseline_latency_ms: None,
            speedup: None,
            raw_profile: None,
            run_features: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.compiled.passed && self.correct.passed
    }

    /// Checks the gating invariants: correctness only after compilation,
    /// timing and profiles only after both.
    pub fn gating_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.correct.passed && !self.compiled.passed {
            v.push("correct reported for a kernel that did not compile".to_string());
        }
        if !self.passed() {
            for (present, what) in [
                (self.timing.is_some(), "timing"),
                (self.speedup.is_some(), "speedup"),
                (self.raw_profile.is_some(), "kernel profile"),
                (self.run_features.is_some(), "run features"),
            ] {
                if present {
                    v.push(format!("{what} reported for a failing kernel"));
                }
            }
        }
        v
    }

    /// Drops whatever the gating invariants forbid.
    fn enforce_gating(&mut self) {
        if self.correct.passed && !self.compiled.passed {
            self.correct = CheckOutcome::skipped();
        }
        if !self.passed() {
            self.timing = None;
            self.speedup = None;
            self.raw_profile = None;
            self.run_features = None;
        }
    }

    /// Speedup as reported, or derived from timing and baseline.
    pub fn effective_speedup(&self) -> Option<f64> {
        if !self.passed() {
            return None;
        }
        self.speedup.or_else(|| {
            let t = self.timing.as_ref()?;
            compute_speedup(self.baseline_latency_ms?, t.mean_latency_ms).ok()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub max_rounds: u32,
    pub seed_count: usize,
    pub rt: f64,
    pub at: f64,
    pub tolerance_abs: f64,
    pub tolerance_rel: f64,
    /// Randomized input draws for the correctness check.
    pub trials: u32,
    pub warmup: u32,
    pub iters: u32,
    /// Profile every passing candidate, not only new base kernels.
    pub profile_every_success: bool,
    pub device: u32,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            max_rounds: 15,
            seed_count: 3,
            rt: 0.3,
            at: 0.3,
            tolerance_abs: 1e-2,
            tolerance_rel: 1e-2,
            trials: 5,
            warmup: 25,
            iters: 100,
            profile_every_success: true,
            device: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_rounds < 1 {
            return Err("max_rounds must be at least 1".into());
        }
        if self.seed_count < 1 {
            return Err("seed_count must be at least 1".into());
        }
        for (v, name) in [(self.rt, "rt"), (self.at, "at")] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be a non-negative number"));
            }
        }
        for (v, name) in [(self.tolerance_abs, "tolerance_abs"), (self.tolerance_rel, "tolerance_rel")] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.warmup < 1 || self.iters < 1 || self.trials < 1 {
            return Err("warmup, iters and trials must be at least 1".into());
        }
        Ok(())
    }

    /// One-line echo of the effective settings.
    pub fn header(&self) -> String {
        format!(
            "rounds={} seeds={} rt={} at={} tolerance_abs={} tolerance_rel={} trials={} warmup={} iters={} profile_every_success={}",
            self.max_rounds,
            self.seed_count,
            self.rt,
            self.at,
            self.tolerance_abs,
            self.tolerance_rel,
            self.trials,
            self.warmup,
            self.iters,
            self.profile_every_success
        )
    }
}

/// One benchmark task: a reference program to rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    #[serde(default = "default_level")]
    pub level: u32,
    pub reference_source: String,
}

fn default_level() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub task_id: String,
    #[serde(default = "default_level")]
    pub level: u32,
    /// Path of the reference program, relative to the manifest.
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub tasks: Vec<ManifestEntry>,
}

impl TaskManifest {
    pub fn load(path: &Path) -> Result<Vec<TaskSpec>, SessionFault> {
        let text = read(path)?;
        let manifest: TaskManifest = serde_json::from_str(&text).map_err(|e| SessionFault::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut seen = std::collections::BTreeSet::new();
        manifest
            .tasks
            .into_iter()
            .map(|t| {
                if !seen.insert(t.task_id.clone()) {
                    return Err(SessionFault::Config(format!("duplicate task id {}", t.task_id)));
                }
                Ok(TaskSpec {
                    reference_source: read(&base.join(&t.reference))?,
                    task_id: t.task_id,
                    level: t.level,
                })
            })
            .collect()
    }
}

pub(crate) fn read(path: &Path) -> Result<String, SessionFault> {
    std::fs::read_to_string(path).map_err(|source| SessionFault::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// What the evaluator is asked to do with one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRequest {
    pub task_id: String,
    pub kernel_id: String,
    pub kernel_source: String,
    pub reference_source: String,
    pub settings: EvaluationSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSettings {
    pub warmup: u32,
    pub iters: u32,
    pub tolerance_abs: f64,
    pub tolerance_rel: f64,
    pub trials: u32,
    /// Run the profilers, if the candidate compiles and verifies.
    pub profile: bool,
    pub device: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum EvaluatorError {
    /// The evaluator can no longer be reached; the session cannot go on.
    #[error("evaluator unavailable: {0}")]
    Gone(String),
    /// One response was unusable; the round fails, the session goes on.
    #[error("evaluator protocol error: {0}")]
    Protocol(String),
    /// A scripted evaluator has no entry for this kernel.
    #[error("no scripted result for kernel {0}")]
    Unscripted(String),
}

pub trait EvaluationBackend {
    fn evaluate(&mut self, request: &EvaluationRequest) -> Result<ReviewerResult, EvaluatorError>;
}

impl<E: EvaluationBackend + ?Sized> EvaluationBackend for Box<E> {
    fn evaluate(&mut self, request: &EvaluationRequest) -> Result<ReviewerResult, EvaluatorError> {
        (**self).evaluate(request)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionFault {
    #[error(transparent)]
    Evaluator(EvaluatorError),
    #[error("trajectory memory rejected a round: {0}")]
    Memory(#[from] MemoryError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("feature extraction: {0}")]
    Features(#[from] FeatureError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("cannot resume: {0}")]
    Resume(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedChoice {
    pub index: usize,
    pub repair_first: bool,
}

/// Picks the passing seed with the lowest mean latency (earliest on ties);
/// without one, the most recent compiling seed, else the first, with the
/// session starting in the repair branch.
pub fn select_seed(results: &[ReviewerResult]) -> Option<SeedChoice> {
    if results.is_empty() {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in results.iter().enumerate() {
        if !r.passed() {
            continue;
        }
        let latency = r.timing.as_ref().map_or(f64::INFINITY, |t| t.mean_latency_ms);
        if best.is_none_or(|(_, b)| latency < b) {
            best = Some((i, latency));
        }
    }
    if let Some((index, _)) = best {
        return Some(SeedChoice {
            index,
            repair_first: false,
        });
    }
    let index = results.iter().rposition(|r| r.compiled.passed).unwrap_or(0);
    Some(SeedChoice {
        index,
        repair_first: true,
    })
}

/// Cached profiling evidence for one base kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseFeedback {
    pub kernel_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_latency_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_profile: Option<RawProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_features: Option<RunFeatures>,
    pub features: FeatureExtraction,
}

impl BaseFeedback {
    pub fn evidence(&self) -> EvidenceBundle {
        EvidenceBundle {
            raw_metrics: self.raw_profile.as_ref().map(|p| p.aggregate.clone()).unwrap_or_default(),
            run_features: self.run_features.as_ref().map(|r| r.values.clone()).unwrap_or_default(),
            code_features: self.features.vector.clone(),
        }
    }

    /// The profiling feedback shown to the Planner.
    pub fn render(&self) -> String {
        let mut out = String::new();
        match (self.mean_latency_ms, self.speedup) {
            (Some(l), Some(s)) => {
                let _ = writeln!(out, "Base kernel {}: mean latency {l:.6} ms, speedup {s:.4}x", self.kernel_id);
            }
            _ => {
                let _ = writeln!(out, "Base kernel {}: no timing recorded", self.kernel_id);
            }
        }
        match &self.raw_profile {
            Some(p) if !p.aggregate.is_empty() => {
                let _ = writeln!(out, "Kernel-level metrics (aggregated over launches):");
                for (k, v) in &p.aggregate {
                    let _ = writeln!(out, "- {k} = {v}");
                }
            }
            _ => {
                let _ = writeln!(out, "No kernel-level profiler data.");
            }
        }
        if let Some(r) = &self.run_features {
            if !r.values.is_empty() {
                let _ = writeln!(out, "Run-level features:");
                for (k, v) in &r.values {
                    let _ = writeln!(out, "- {k} = {v}");
                }
            }
        }
        out
    }
}

/// Everything needed to continue a session from a round boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub state: SessionState,
    pub candidates: BTreeMap<String, KernelCandidate>,
    pub base_feedback: BTreeMap<String, BaseFeedback>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedLog {
    pub candidates: Vec<KernelCandidate>,
    pub reviews: Vec<ReviewerResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub faults: Vec<AgentFault>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub choice: Option<SeedChoice>,
}

/// Full record of one round, persisted as `rounds/NNN.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round_index: u32,
    pub branch: Branch,
    pub base_kernel_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recommendation: Option<MethodRecommendation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<DecisionTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair_plan: Option<RepairPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<KernelCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review: Option<ReviewerResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub promotion: Option<PromotionDecision>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub faults: Vec<AgentFault>,
    /// Infrastructure problems that turned into a failed round.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub record: RoundRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub task_id: String,
    pub level: u32,
    pub success: bool,
    pub best_kernel_id: Option<String>,
    pub best_speedup: Option<f64>,
    pub rounds_used: u32,
    pub state: SessionState,
}

impl SessionResult {
    pub fn outcome(&self) -> TaskOutcome {
        TaskOutcome {
            task_id: self.task_id.clone(),
            level: self.level,
            success: self.success,
            best_speedup: self.best_speedup,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionOutcome {
    Completed(Box<SessionResult>),
    /// Stopped on request after persisting round `after_round`.
    Interrupted { after_round: u32 },
}

impl SessionOutcome {
    pub fn completed(self) -> Option<SessionResult> {
        match self {
            SessionOutcome::Completed(r) => Some(*r),
            SessionOutcome::Interrupted { .. } => None,
        }
    }
}

/// Optional early stop, for interruption tests and bounded runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunControl {
    /// Stop once this many rounds are persisted (0 = right after seeding).
    pub stop_after: Option<u32>,
}

/// The agents and evaluator a session talks to.
pub struct Workers<'a> {
    pub agents: &'a mut dyn ReasoningBackend,
    pub evaluator: &'a mut dyn EvaluationBackend,
}

fn settings(config: &SessionConfig, profile: bool) -> EvaluationSettings {
    EvaluationSettings {
        warmup: config.warmup,
        iters: config.iters,
        tolerance_abs: config.tolerance_abs,
        tolerance_rel: config.tolerance_rel,
        trials: config.trials,
        profile,
        device: config.device,
    }
}

struct Evaluated {
    review: ReviewerResult,
    notes: Vec<String>,
}

fn evaluate(
    evaluator: &mut dyn EvaluationBackend,
    task: &TaskSpec,
    config: &SessionConfig,
    candidate: &KernelCandidate,
    profile: bool,
) -> Result<Evaluated, SessionFault> {
    let request = EvaluationRequest {
        task_id: task.task_id.clone(),
        kernel_id: candidate.kernel_id.clone(),
        kernel_source: candidate.source.clone(),
        reference_source: task.reference_source.clone(),
        settings: settings(config, profile),
    };
    match evaluator.evaluate(&request) {
        Ok(mut review) => {
            let notes: Vec<String> = review
                .gating_violations()
                .into_iter()
                .map(|v| format!("evaluator response dropped data: {v}"))
                .collect();
            review.enforce_gating();
            Ok(Evaluated { review, notes })
        }
        Err(EvaluatorError::Protocol(detail)) => Ok(Evaluated {
            review: ReviewerResult::failed_compile(format!("evaluator protocol error: {detail}")),
            notes: vec![format!("evaluator protocol error: {detail}")],
        }),
        Err(e) => Err(SessionFault::Evaluator(e)),
    }
}

fn summary(review: &ReviewerResult, speedup: f64) -> ProfileSummary {
    let latency = review.timing.as_ref().map_or(f64::NAN, |t| t.mean_latency_ms);
    let runs = review.timing.as_ref().map_or(0, |t| t.sample_count);
    ProfileSummary {
        speedup,
        mean_latency_ms: latency,
        feedback: format!("mean latency {latency:.6} ms over {runs} timed runs; speedup {speedup:.4}x"),
    }
}

/// A running session: configuration, collaborators and the checkpoint.
pub struct Session<'a> {
    pub task: &'a TaskSpec,
    pub config: &'a SessionConfig,
    pub kb: &'a KnowledgeBase,
    pub checkpoint: Checkpoint,
    log: Option<SessionLog>,
}

impl<'a> Session<'a> {
    /// Installs a kernel as base, caching its features and profile.
    fn install_base(
        &mut self,
        workers: &mut Workers<'_>,
        kernel_id: &str,
        review: &ReviewerResult,
        round: u32,
    ) -> Result<Vec<String>, SessionFault> {
        let mut notes = Vec::new();
        let candidate = self.checkpoint.candidates[kernel_id].clone();
        let (mut raw_profile, mut run_features) = (review.raw_profile.clone(), review.run_features.clone());
        if raw_profile.is_none() && run_features.is_none() {
            let again = evaluate(workers.evaluator, self.task, self.config, &candidate, true)?;
            notes.extend(again.notes);
            if again.review.passed() {
                raw_profile = again.review.raw_profile;
                run_features = again.review.run_features;
            } else {
                notes.push(format!("re-profiling base {kernel_id} failed; planning without profiler data"));
            }
        }
        let extraction = features::extract(&candidate.source, self.kb, Some(&mut *workers.agents), Some(round))?;
        self.checkpoint.base_feedback.insert(
            kernel_id.to_string(),
            BaseFeedback {
                kernel_id: kernel_id.to_string(),
                speedup: review.effective_speedup(),
                mean_latency_ms: review.timing.as_ref().map(|t| t.mean_latency_ms),
                raw_profile,
                run_features,
                features: extraction,
            },
        );
        Ok(notes)
    }

    fn seed(task: &'a TaskSpec, config: &'a SessionConfig, kb: &'a KnowledgeBase, workers: &mut Workers<'_>, log: Option<SessionLog>) -> Result<Session<'a>, SessionFault> {
        let mut session = Session {
            task,
            config,
            kb,
            checkpoint: Checkpoint {
                state: SessionState::new(config.rt, config.at),
                candidates: BTreeMap::new(),
                base_feedback: BTreeMap::new(),
            },
            log,
        };
        let mut notes = Vec::new();
        let batch = match agents::generate_seeds(workers.agents, &task.reference_source, config.seed_count) {
            Ok(b) => b,
            Err(e) => {
                notes.push(format!("seed generation failed: {e}"));
                agents::SeedBatch {
                    candidates: Vec::new(),
                    faults: Vec::new(),
                }
            }
        };
        let mut reviews = Vec::with_capacity(batch.candidates.len());
        for c in &batch.candidates {
            let e = evaluate(workers.evaluator, task, config, c, config.profile_every_success)?;
            notes.extend(e.notes);
            reviews.push(e.review);
            session.checkpoint.candidates.insert(c.kernel_id.clone(), c.clone());
        }
        let choice = select_seed(&reviews);
        if let Some(choice) = choice {
            let id = batch.candidates[choice.index].kernel_id.clone();
            let review = &reviews[choice.index];
            session.checkpoint.state.start_from_seed(
                &id,
                review.compiled.clone(),
                review.correct.clone(),
                review.effective_speedup(),
            );
            if session.checkpoint.state.base_kernel_id.as_deref() == Some(id.as_str()) {
                notes.extend(session.install_base(workers, &id, review, 0)?);
            }
        }
        let seeds = SeedLog {
            candidates: batch.candidates,
            reviews,
            faults: batch.faults,
            notes,
            choice,
        };
        if let Some(log) = &session.log {
            log.write_seeds(&seeds)?;
            log.write_session(task, config, kb, &session.checkpoint)?;
        }
        Ok(session)
    }

    /// Runs round `state.round_counter + 1`.
    pub fn run_round(&mut self, workers: &mut Workers<'_>) -> Result<RoundLog, SessionFault> {
        let state = &self.checkpoint.state;
        let round = state.round_counter + 1;
        let branch = state.next_branch();
        let base_id = state.base_kernel_id.clone();
        let new_id = format!("k{round}");
        let mut log = RoundLog {
            round_index: round,
            branch,
            base_kernel_id: base_id.clone(),
            recommendation: None,
            trace: None,
            plan: None,
            repair_plan: None,
            candidate: None,
            review: None,
            promotion: None,
            faults: Vec::new(),
            notes: Vec::new(),
            record: RoundRecord {
                round_index: round,
                branch,
                plan: None,
                kernel_id: None,
                compile: CheckOutcome::skipped(),
                verify: CheckOutcome::skipped(),
                profile: None,
                base_id_at_time: base_id.clone(),
            },
        };

        let edit = match branch {
            Branch::Optimize => self.optimize_step(workers, round, &new_id, &mut log),
            Branch::Repair => self.repair_step(workers, round, &new_id, &mut log),
        };
        match edit {
            Err(problem) => {
                log.notes.push(problem.clone());
                log.record.compile = CheckOutcome::fail(problem);
            }
            Ok(edit) => {
                log.faults.extend(edit.fault.clone());
                let candidate = edit.candidate;
                self.checkpoint.candidates.insert(candidate.kernel_id.clone(), candidate.clone());
                log.record.kernel_id = Some(candidate.kernel_id.clone());
                let review = match edit.shell_violation {
                    Some(v) => ReviewerResult::failed_compile(format!("shell violation: {v}")),
                    None => {
                        let e = evaluate(workers.evaluator, self.task, self.config, &candidate, self.config.profile_every_success)?;
                        log.notes.extend(e.notes);
                        e.review
                    }
                };
                log.record.compile = review.compiled.clone();
                log.record.verify = review.correct.clone();
                let speedup = review.effective_speedup();
                if review.passed() && speedup.is_none() {
                    log.notes.push("passing kernel has no timing; it cannot be promoted".into());
                }
                log.record.profile = speedup.map(|s| summary(&review, s));
                log.candidate = Some(candidate);
                log.review = Some(review);
            }
        }

        self.checkpoint.state.record_round(log.record.clone())?;
        if let (Some(id), Some(profile)) = (&log.record.kernel_id, &log.record.profile) {
            let decision = self.checkpoint.state.consider_promotion(id, profile.speedup);
            if decision.update_base {
                let review = log.review.clone().expect("passing round has a review");
                let notes = self.install_base(workers, id, &review, round)?;
                log.notes.extend(notes);
            }
            log.promotion = Some(decision);
        }
        if let Some(l) = &self.log {
            l.write_round(&log)?;
            l.write_session(self.task, self.config, self.kb, &self.checkpoint)?;
        }
        Ok(log)
    }

    fn optimize_step(
        &mut self,
        workers: &mut Workers<'_>,
        round: u32,
        new_id: &str,
        log: &mut RoundLog,
    ) -> Result<agents::Edit, String> {
        let base_id = log.base_kernel_id.clone().ok_or("optimize round without a base kernel")?;
        let base = self.checkpoint.candidates[&base_id].clone();
        let feedback = &self.checkpoint.base_feedback[&base_id];
        let (rec, trace) = recommend(&feedback.evidence(), self.kb);
        log.recommendation = Some(rec.clone());
        log.trace = Some(trace);
        let context = self.checkpoint.state.optimization_context();
        let (plan, fault) = agents::plan_optimization(workers.agents, round, &rec, &feedback.render(), &context, &base)
            .map_err(|e| format!("planner: {e}"))?;
        log.faults.extend(fault);
        log.record.plan = Some(plan.note());
        log.plan = Some(plan.clone());
        agents::apply_optimization(workers.agents, round, &plan, &base, new_id).map_err(|e| format!("optimizer: {e}"))
    }

    fn repair_step(
        &mut self,
        workers: &mut Workers<'_>,
        round: u32,
        new_id: &str,
        log: &mut RoundLog,
    ) -> Result<agents::Edit, String> {
        let state = &self.checkpoint.state;
        let chain = state.open_chain().ok_or("repair round without an open chain")?;
        let tail = chain.tail_kernel_id().to_string();
        let (compile, verify) = chain
            .attempts
            .iter()
            .rev()
            .find(|a| a.kernel_id.is_some())
            .map_or((&chain.origin_compile, &chain.origin_verify), |a| (&a.compile, &a.verify));
        let (compile, verify) = (compile.feedback.clone(), verify.feedback.clone());
        let context = state.repair_context().map_err(|e| e.to_string())?;
        let latest = self.checkpoint.candidates[&tail].clone();
        let (plan, fault) = agents::diagnose(workers.agents, round, &compile, &verify, &context, &latest)
            .map_err(|e| format!("diagnoser: {e}"))?;
        log.faults.extend(fault);
        log.record.plan = Some(plan.note());
        log.repair_plan = Some(plan.clone());
        agents::apply_repair(workers.agents, round, &plan, &latest, new_id).map_err(|e| format!("repairer: {e}"))
    }

    fn result(&self) -> SessionResult {
        let state = &self.checkpoint.state;
        SessionResult {
            task_id: self.task.task_id.clone(),
            level: self.task.level,
            success: state.best_kernel_id.is_some() || state.rounds.iter().any(RoundRecord::passed),
            best_kernel_id: state.best_kernel_id.clone(),
            best_speedup: state.best_kernel_id.as_ref().map(|_| state.speedup_best),
            rounds_used: state.round_counter,
            state: state.clone(),
        }
    }

    fn drive(mut self, workers: &mut Workers<'_>, control: RunControl) -> Result<SessionOutcome, SessionFault> {
        let can_run = !self.checkpoint.candidates.is_empty();
        while can_run && self.checkpoint.state.round_counter < self.config.max_rounds {
            if control.stop_after == Some(self.checkpoint.state.round_counter) {
                return Ok(SessionOutcome::Interrupted {
                    after_round: self.checkpoint.state.round_counter,
                });
            }
            self.run_round(workers)?;
        }
        let result = self.result();
        if let Some(l) = &self.log {
            l.write_result(&result)?;
        }
        Ok(SessionOutcome::Completed(Box::new(result)))
    }
}

/// Runs a session from scratch. With `log_dir`, everything is persisted
/// under it and the session can be resumed at any round boundary.
pub fn run_session(
    task: &TaskSpec,
    config: &SessionConfig,
    kb: &KnowledgeBase,
    workers: &mut Workers<'_>,
    log_dir: Option<&Path>,
    control: RunControl,
) -> Result<SessionOutcome, SessionFault> {
    config.validate().map_err(SessionFault::Config)?;
    let log = log_dir.map(SessionLog::create).transpose()?;
    let session = Session::seed(task, config, kb, workers, log)?;
    if control.stop_after == Some(0) {
        return Ok(SessionOutcome::Interrupted { after_round: 0 });
    }
    session.drive(workers, control)
}

/// Continues a persisted session from its last completed round.
pub fn resume_session(
    log_dir: &Path,
    kb: &KnowledgeBase,
    workers: &mut Workers<'_>,
    control: RunControl,
) -> Result<SessionOutcome, SessionFault> {
    let log = SessionLog::open(log_dir)?;
    let doc = log.read_session()?;
    doc.check_kb(kb)?;
    let session = Session {
        task: &doc.task,
        config: &doc.config,
        kb,
        checkpoint: doc.checkpoint.clone(),
        log: Some(log),
    };
    session.drive(workers, control)
}

/// Runs `f` over `items` on at most `limit` threads, keeping input order.
pub fn run_parallel<T: Sync, R: Send>(items: &[T], limit: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..limit.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every item ran"))
        .collect()
}
