//! Short-term memory for one optimization task.
//!
//! A session keeps every round record, the repair chains opened by failing
//! kernels, one optimization history per base kernel, and the base/best
//! bookkeeping. Everything here is plain data plus pure updates, so a session
//! can be rebuilt by replaying its round records.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Method label recorded when a plan was made without knowledge-base methods.
pub const FALLBACK_METHOD: &str = crate::kb::FALLBACK_MARKER;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Repair,
    Optimize,
}

/// Pass/fail plus the tool output behind it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub passed: bool,
    pub feedback: String,
}

impl CheckOutcome {
    pub fn pass(feedback: impl Into<String>) -> Self {
        CheckOutcome {
            passed: true,
            feedback: feedback.into(),
        }
    }

    pub fn fail(feedback: impl Into<String>) -> Self {
        CheckOutcome {
            passed: false,
            feedback: feedback.into(),
        }
    }

    /// Marker for a check that never ran because an earlier one failed.
    pub fn skipped() -> Self {
        CheckOutcome::fail("not run")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub speedup: f64,
    pub mean_latency_ms: f64,
    pub feedback: String,
}

/// Short description of the plan a round executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanNote {
    /// Target method (optimize) or suspected root cause (repair).
    pub label: String,
    pub summary: String,
    /// Where the full plan document is stored, relative to the session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: u32,
    pub branch: Branch,
    pub plan: Option<PlanNote>,
    /// `None` when the agent produced no program at all.
    pub kernel_id: Option<String>,
    pub compile: CheckOutcome,
    pub verify: CheckOutcome,
    pub profile: Option<ProfileSummary>,
    pub base_id_at_time: Option<String>,
}

impl RoundRecord {
    pub fn passed(&self) -> bool {
        self.compile.passed && self.verify.passed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairAttempt {
    pub round_index: u32,
    pub plan: Option<PlanNote>,
    pub kernel_id: Option<String>,
    pub compile: CheckOutcome,
    pub verify: CheckOutcome,
}

impl RepairAttempt {
    pub fn passed(&self) -> bool {
        self.compile.passed && self.verify.passed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairChain {
    pub origin_kernel_id: String,
    /// Round that produced the origin; 0 for a seed.
    pub origin_round: u32,
    pub origin_compile: CheckOutcome,
    pub origin_verify: CheckOutcome,
    pub attempts: Vec<RepairAttempt>,
    pub open: bool,
}

impl RepairChain {
    /// Most recent kernel in the chain: the one the next repair edits.
    pub fn tail_kernel_id(&self) -> &str {
        self.attempts
            .iter()
            .rev()
            .find_map(|a| a.kernel_id.as_deref())
            .unwrap_or(&self.origin_kernel_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttemptOutcome {
    Speedup { speedup: f64 },
    Failure { detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round_index: u32,
    pub method: String,
    pub plan: Option<PlanNote>,
    pub outcome: AttemptOutcome,
    /// Speedup reached once the repair chain this failure opened closed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repaired_speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationHistory {
    pub base_kernel_id: String,
    pub entries: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub base_kernel_id: Option<String>,
    pub best_kernel_id: Option<String>,
    pub speedup_base: f64,
    pub speedup_best: f64,
    pub round_counter: u32,
    pub rt: f64,
    pub at: f64,
    pub rounds: Vec<RoundRecord>,
    pub chains: Vec<RepairChain>,
    pub histories: BTreeMap<String, OptimizationHistory>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MemoryError {
    #[error("round {got} recorded out of order; expected round {expected}")]
    SequenceViolation { expected: u32, got: u32 },
    #[error("round {round}: {detail}")]
    BranchViolation { round: u32, detail: String },
    #[error("no open repair chain")]
    NoOpenChain,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromotionDecision {
    pub update_best: bool,
    pub update_base: bool,
}

/// Strict `value > threshold`, ignoring differences at the level of binary
/// rounding so that decimal boundaries like 1.3 behave as exact.
fn exceeds(value: f64, threshold: f64) -> bool {
    value - threshold > 1e-9 * threshold.abs().max(1.0)
}

impl SessionState {
    pub fn new(rt: f64, at: f64) -> Self {
        SessionState {
            base_kernel_id: None,
            best_kernel_id: None,
            speedup_base: 0.0,
            speedup_best: 0.0,
            round_counter: 0,
            rt,
            at,
            rounds: Vec::new(),
            chains: Vec::new(),
            histories: BTreeMap::new(),
        }
    }

    /// Installs the selected seed. A passing seed becomes base and best; a
    /// failing one opens the first repair chain.
    pub fn start_from_seed(
        &mut self,
        kernel_id: &str,
        compile: CheckOutcome,
        verify: CheckOutcome,
        speedup: Option<f64>,
    ) {
        match speedup {
            Some(s) if compile.passed && verify.passed => {
                self.base_kernel_id = Some(kernel_id.to_string());
                self.best_kernel_id = Some(kernel_id.to_string());
                self.speedup_base = s;
                self.speedup_best = s;
                self.ensure_history(kernel_id);
            }
            _ => self.chains.push(RepairChain {
                origin_kernel_id: kernel_id.to_string(),
                origin_round: 0,
                origin_compile: compile,
                origin_verify: verify,
                attempts: Vec::new(),
                open: true,
            }),
        }
    }

    pub fn open_chain(&self) -> Option<&RepairChain> {
        self.chains.iter().rev().find(|c| c.open)
    }

    /// Branch the next round takes: repair while a chain is open.
    pub fn next_branch(&self) -> Branch {
        if self.open_chain().is_some() {
            Branch::Repair
        } else {
            Branch::Optimize
        }
    }

    fn ensure_history(&mut self, base: &str) {
        self.histories
            .entry(base.to_string())
            .or_insert_with(|| OptimizationHistory {
                base_kernel_id: base.to_string(),
                entries: Vec::new(),
            });
    }

    /// Appends a round and updates chains and histories for its branch.
    pub fn record_round(&mut self, record: RoundRecord) -> Result<(), MemoryError> {
        let expected = self.round_counter + 1;
        if record.round_index != expected {
            return Err(MemoryError::SequenceViolation {
                expected,
                got: record.round_index,
            });
        }
        if record.profile.is_some() && !record.passed() {
            return Err(MemoryError::BranchViolation {
                round: record.round_index,
                detail: "profile recorded for a failing kernel".into(),
            });
        }
        if record.branch != self.next_branch() {
            return Err(MemoryError::BranchViolation {
                round: record.round_index,
                detail: format!("expected a {:?} round", self.next_branch()),
            });
        }
        match record.branch {
            Branch::Repair => self.record_repair(&record),
            Branch::Optimize => self.record_optimize(&record),
        }
        self.rounds.push(record);
        self.round_counter = expected;
        Ok(())
    }

    fn record_repair(&mut self, record: &RoundRecord) {
        let chain = self
            .chains
            .iter_mut()
            .rev()
            .find(|c| c.open)
            .expect("branch check guarantees an open chain");
        chain.attempts.push(RepairAttempt {
            round_index: record.round_index,
            plan: record.plan.clone(),
            kernel_id: record.kernel_id.clone(),
            compile: record.compile.clone(),
            verify: record.verify.clone(),
        });
        if record.passed() && record.kernel_id.is_some() {
            chain.open = false;
            let origin_round = chain.origin_round;
            let speedup = record.profile.as_ref().map(|p| p.speedup);
            for history in self.histories.values_mut() {
                for entry in &mut history.entries {
                    if entry.round_index == origin_round {
                        entry.repaired_speedup = speedup;
                    }
                }
            }
        }
    }

    fn record_optimize(&mut self, record: &RoundRecord) {
        let base = record
            .base_id_at_time
            .clone()
            .or_else(|| self.base_kernel_id.clone())
            .unwrap_or_default();
        let method = record
            .plan
            .as_ref()
            .map(|p| p.label.clone())
            .unwrap_or_else(|| FALLBACK_METHOD.to_string());
        let outcome = match (&record.profile, record.passed()) {
            (Some(p), true) => AttemptOutcome::Speedup { speedup: p.speedup },
            (None, true) => AttemptOutcome::Failure {
                detail: "passed checks but was not profiled".into(),
            },
            _ => AttemptOutcome::Failure {
                detail: failure_detail(&record.compile, &record.verify),
            },
        };
        self.ensure_history(&base);
        self.histories.get_mut(&base).expect("just ensured").entries.push(HistoryEntry {
            round_index: record.round_index,
            method,
            plan: record.plan.clone(),
            outcome,
            repaired_speedup: None,
        });
        if let (Some(kernel), false) = (&record.kernel_id, record.passed()) {
            self.chains.push(RepairChain {
                origin_kernel_id: kernel.clone(),
                origin_round: record.round_index,
                origin_compile: record.compile.clone(),
                origin_verify: record.verify.clone(),
                attempts: Vec::new(),
                open: true,
            });
        }
    }

    /// Applies the base and best update rules for a passing kernel.
    pub fn consider_promotion(&mut self, kernel_id: &str, speedup_new: f64) -> PromotionDecision {
        let decision = match self.base_kernel_id {
            None => PromotionDecision {
                update_best: true,
                update_base: true,
            },
            Some(_) => PromotionDecision {
                update_best: speedup_new > self.speedup_best,
                update_base: exceeds(speedup_new / self.speedup_base, 1.0 + self.rt)
                    || exceeds(speedup_new - self.speedup_base, self.at),
            },
        };
        if decision.update_best {
            self.best_kernel_id = Some(kernel_id.to_string());
            self.speedup_best = speedup_new;
        }
        if decision.update_base {
            self.base_kernel_id = Some(kernel_id.to_string());
            self.speedup_base = speedup_new;
            self.ensure_history(kernel_id);
        }
        decision
    }

    /// Full history of the open repair chain, oldest first.
    pub fn repair_context(&self) -> Result<RepairContext, MemoryError> {
        let chain = self.open_chain().ok_or(MemoryError::NoOpenChain)?;
        Ok(RepairContext {
            origin_kernel_id: chain.origin_kernel_id.clone(),
            origin_round: chain.origin_round,
            origin_compile: chain.origin_compile.clone(),
            origin_verify: chain.origin_verify.clone(),
            attempts: chain.attempts.clone(),
        })
    }

    /// Methods tried on the current base and how they turned out.
    pub fn optimization_context(&self) -> OptimizationContext {
        let entries = self
            .base_kernel_id
            .as_ref()
            .and_then(|b| self.histories.get(b))
            .map(|h| h.entries.clone())
            .unwrap_or_default();
        OptimizationContext {
            base_kernel_id: self.base_kernel_id.clone(),
            entries,
        }
    }
}

fn failure_detail(compile: &CheckOutcome, verify: &CheckOutcome) -> String {
    if !compile.passed {
        format!("compile failed: {}", first_line(&compile.feedback))
    } else {
        format!("verification failed: {}", first_line(&verify.feedback))
    }
}

fn first_line(s: &str) -> &str {
    s.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim()
}

fn status(compile: &CheckOutcome, verify: &CheckOutcome) -> String {
    if !compile.passed {
        format!("compile FAILED\n    {}", indent(&compile.feedback))
    } else if !verify.passed {
        format!("compiled; verification FAILED\n    {}", indent(&verify.feedback))
    } else {
        "compiled and verified".to_string()
    }
}

fn indent(s: &str) -> String {
    s.trim_end().replace('\n', "\n    ")
}

/// The open repair chain as the Diagnoser sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairContext {
    pub origin_kernel_id: String,
    pub origin_round: u32,
    pub origin_compile: CheckOutcome,
    pub origin_verify: CheckOutcome,
    pub attempts: Vec<RepairAttempt>,
}

impl RepairContext {
    /// One line per earlier repair attempt that did not fix the kernel.
    pub fn failed_attempts(&self) -> Vec<String> {
        self.attempts
            .iter()
            .filter(|a| !a.passed())
            .map(|a| {
                let plan = a
                    .plan
                    .as_ref()
                    .map(|p| format!("{}: {}", p.label, p.summary))
                    .unwrap_or_else(|| "no plan".into());
                format!(
                    "round {} ({}): {} -> {}",
                    a.round_index,
                    a.kernel_id.as_deref().unwrap_or("no kernel"),
                    plan,
                    failure_detail(&a.compile, &a.verify)
                )
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Chain origin: kernel {} (round {}): {}",
            self.origin_kernel_id,
            self.origin_round,
            status(&self.origin_compile, &self.origin_verify)
        );
        for (i, a) in self.attempts.iter().enumerate() {
            let plan = a
                .plan
                .as_ref()
                .map(|p| format!("{} | {}", p.label, p.summary))
                .unwrap_or_else(|| "no plan".into());
            let _ = writeln!(
                out,
                "Attempt {} (round {}) -> kernel {}\n  plan: {}\n  result: {}",
                i + 1,
                a.round_index,
                a.kernel_id.as_deref().unwrap_or("none"),
                plan,
                status(&a.compile, &a.verify)
            );
        }
        out
    }
}

/// The current base's optimization history as the Planner sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationContext {
    pub base_kernel_id: Option<String>,
    pub entries: Vec<HistoryEntry>,
}

impl OptimizationContext {
    pub fn render(&self) -> String {
        if self.entries.is_empty() {
            return "No methods have been tried on this base kernel yet.\n".into();
        }
        let mut out = String::new();
        for e in &self.entries {
            let outcome = match &e.outcome {
                AttemptOutcome::Speedup { speedup } => format!("speedup {speedup:.3}x"),
                AttemptOutcome::Failure { detail } => match e.repaired_speedup {
                    Some(s) => format!("failed ({detail}); repaired to {s:.3}x"),
                    None => format!("failed ({detail})"),
                },
            };
            let summary = e.plan.as_ref().map(|p| p.summary.as_str()).unwrap_or("");
            let _ = writeln!(out, "- round {}: {} -> {}", e.round_index, e.method, outcome);
            if !summary.is_empty() {
                let _ = writeln!(out, "  plan: {summary}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(speedup: f64) -> SessionState {
        let mut s = SessionState::new(0.3, 0.3);
        s.start_from_seed("seed0", CheckOutcome::pass(""), CheckOutcome::pass(""), Some(speedup));
        s
    }

    fn note(label: &str) -> Option<PlanNote> {
        Some(PlanNote {
            label: label.into(),
            summary: format!("apply {label}"),
            reference: None,
        })
    }

    fn round(state: &SessionState, branch: Branch, kernel: &str, ok: bool, speedup: Option<f64>) -> RoundRecord {
        RoundRecord {
            round_index: state.round_counter + 1,
            branch,
            plan: note(if branch == Branch::Repair { "fix" } else { "tiling" }),
            kernel_id: Some(kernel.into()),
            compile: if ok { CheckOutcome::pass("") } else { CheckOutcome::fail("error: bad") },
            verify: if ok { CheckOutcome::pass("") } else { CheckOutcome::skipped() },
            profile: speedup.map(|s| ProfileSummary {
                speedup: s,
                mean_latency_ms: 1.0,
                feedback: String::new(),
            }),
            base_id_at_time: state.base_kernel_id.clone(),
        }
    }

    #[test]
    fn promotion_thresholds() {
        let mut s = seeded(1.0);
        assert_eq!(
            s.consider_promotion("k1", 1.35),
            PromotionDecision { update_best: true, update_base: true }
        );

        let mut s = seeded(2.0);
        let d = s.consider_promotion("k1", 2.35);
        assert!(d.update_base, "absolute gain 0.35 clears 0.3");

        let mut s = seeded(2.0);
        let d = s.consider_promotion("k1", 2.2);
        assert_eq!(d, PromotionDecision { update_best: true, update_base: false });
        assert_eq!(s.base_kernel_id.as_deref(), Some("seed0"));
        assert_eq!(s.best_kernel_id.as_deref(), Some("k1"));

        let mut s = seeded(2.0);
        assert_eq!(s.consider_promotion("k1", 2.0), PromotionDecision::default());

        // Exactly on the boundary: neither strict inequality holds.
        let mut s = seeded(1.0);
        assert!(!s.consider_promotion("k1", 1.3).update_base);
        let mut s = seeded(0.5);
        assert!(!s.consider_promotion("k1", 0.65).update_base);
        let mut s = seeded(3.0);
        assert!(!s.consider_promotion("k1", 3.3).update_base);
    }

    #[test]
    fn failing_optimize_opens_chain_and_passing_repair_closes_it() {
        let mut s = seeded(1.0);
        let r = round(&s, Branch::Optimize, "k1", false, None);
        s.record_round(r).unwrap();
        assert_eq!(s.next_branch(), Branch::Repair);
        assert_eq!(s.open_chain().unwrap().origin_kernel_id, "k1");

        let r = round(&s, Branch::Repair, "k2", false, None);
        s.record_round(r).unwrap();
        assert_eq!(s.open_chain().unwrap().tail_kernel_id(), "k2");
        let r = round(&s, Branch::Repair, "k3", true, Some(1.1));
        s.record_round(r).unwrap();
        assert!(s.open_chain().is_none());
        assert_eq!(s.histories["seed0"].entries[0].repaired_speedup, Some(1.1));
    }

    #[test]
    fn out_of_order_rounds_are_rejected() {
        let mut s = seeded(1.0);
        let r = round(&s, Branch::Optimize, "k1", true, Some(1.1));
        s.record_round(r.clone()).unwrap();
        assert_eq!(
            s.record_round(r),
            Err(MemoryError::SequenceViolation { expected: 2, got: 1 })
        );
        let bad = round(&s, Branch::Repair, "k2", true, Some(1.0));
        assert!(matches!(s.record_round(bad), Err(MemoryError::BranchViolation { .. })));
    }

    #[test]
    fn repair_context_spans_only_the_open_chain() {
        let mut s = seeded(1.0);
        assert_eq!(s.repair_context(), Err(MemoryError::NoOpenChain));
        // First chain: k1 fails, k2 repairs it.
        for (branch, k, ok) in [(Branch::Optimize, "k1", false), (Branch::Repair, "k2", true)] {
            let r = round(&s, branch, k, ok, ok.then_some(1.0));
            s.record_round(r).unwrap();
        }
        // Second chain: k3 fails, k4 and k5 fail again.
        for (branch, k) in [(Branch::Optimize, "k3"), (Branch::Repair, "k4"), (Branch::Repair, "k5")] {
            let r = round(&s, branch, k, false, None);
            s.record_round(r).unwrap();
        }
        let ctx = s.repair_context().unwrap();
        assert_eq!(ctx.origin_kernel_id, "k3");
        assert_eq!(ctx.attempts.len(), 2);
        assert_eq!(ctx.failed_attempts().len(), 2);
        let text = ctx.render();
        assert!(text.contains("kernel k3") && text.contains("kernel k4") && text.contains("kernel k5"));
        assert!(!text.contains("kernel k1") && !text.contains("kernel k2"));
        assert!(text.find("k4").unwrap() < text.find("k5").unwrap());
        assert_eq!(ctx.render(), s.repair_context().unwrap().render());
    }

    #[test]
    fn optimization_context_is_scoped_to_base() {
        let mut s = seeded(1.0);
        assert!(s.optimization_context().entries.is_empty());
        for (k, sp) in [("k1", 1.05), ("k2", 1.1), ("k3", 1.2)] {
            let r = round(&s, Branch::Optimize, k, true, Some(sp));
            s.record_round(r).unwrap();
        }
        let ctx = s.optimization_context();
        assert_eq!(ctx.entries.iter().map(|e| e.round_index).collect::<Vec<_>>(), [1, 2, 3]);
        assert!(s.consider_promotion("k4", 2.0).update_base);
        assert!(s.optimization_context().entries.is_empty());
        assert_eq!(s.optimization_context().base_kernel_id.as_deref(), Some("k4"));
    }

    #[test]
    fn failing_seed_starts_in_repair() {
        let mut s = SessionState::new(0.3, 0.3);
        s.start_from_seed("seed2", CheckOutcome::pass(""), CheckOutcome::fail("mismatch"), None);
        assert_eq!(s.next_branch(), Branch::Repair);
        let r = round(&s, Branch::Repair, "k1", true, Some(0.8));
        s.record_round(r).unwrap();
        assert!(s.consider_promotion("k1", 0.8).update_base);
        assert_eq!(s.best_kernel_id.as_deref(), Some("k1"));
    }
}
