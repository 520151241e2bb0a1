//! `kerntune`: run optimization sessions, validate knowledge bases, explain
//! decisions, parse profiler exports and summarize results.
//!
//! Exit status: 0 on success, 1 when the command ran but its check failed
//! (validation errors, inconsistent replay, aborted sessions), 2 on usage
//! and configuration errors.

mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kerntune_core::kb::{load_knowledge_base, validate_knowledge_base, KnowledgeBase, Severity};
use kerntune_core::orchestrator::{
    compute_metrics, metrics_by_level, replay_from_logs, MetricsReport, SessionLog, SessionResult, TaskOutcome,
};
use kerntune_core::profiling::{parse_ncu_csv, parse_nsys_summary};

#[derive(Parser)]
#[command(name = "kerntune", version, about = "Memory-guided multi-agent GPU kernel optimization")]
struct Cli {
    /// Knowledge base: a directory of section documents or a bundle file.
    #[arg(long, global = true, default_value = "kb")]
    kb: PathBuf,
    /// Emit one structured JSON document instead of human-readable text.
    #[arg(long, global = true)]
    machine: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Run optimization sessions for a task manifest or scenario directories.
    Run(run::RunArgs),
    /// Check a knowledge base for structural and semantic defects.
    ValidateKb {
        /// Defaults to the global --kb path.
        path: Option<PathBuf>,
    },
    /// Show the decision trace behind one optimize round.
    Explain {
        session: PathBuf,
        #[arg(long)]
        round: u32,
    },
    /// Parse profiler exports into decision-engine input.
    ParseProfile {
        /// Kernel-level profiler CSV export.
        #[arg(long)]
        ncu: Option<PathBuf>,
        /// System-level profiler kernel summary CSV.
        #[arg(long)]
        nsys: Option<PathBuf>,
    },
    /// Summarize finished sessions as a metrics table.
    Report {
        /// Directory holding one sub-directory per session.
        sessions_dir: PathBuf,
        /// Round budget for per-round efficiency (defaults to the largest session budget).
        #[arg(long)]
        rounds: Option<u32>,
    },
    /// Rebuild a session's memory from its logs and compare with its checkpoint.
    Replay {
        session: PathBuf,
        /// Also re-execute this scenario and compare logs byte for byte.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Scripted,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvaluatorKind {
    Scripted,
    Harness,
}

/// Session knobs; unset flags keep the configuration's own values.
#[derive(Args, Debug, Clone, Default)]
pub struct Knobs {
    /// Optimization rounds per task.
    #[arg(long)]
    pub rounds: Option<u32>,
    /// Seed kernels generated before the first round.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Relative promotion threshold.
    #[arg(long, allow_negative_numbers = true)]
    pub rt: Option<f64>,
    /// Absolute promotion threshold.
    #[arg(long, allow_negative_numbers = true)]
    pub at: Option<f64>,
    /// Correctness tolerance, absolute and relative.
    #[arg(long, allow_negative_numbers = true)]
    pub tolerance: Option<f64>,
    /// Randomized inputs per correctness check.
    #[arg(long)]
    pub trials: Option<u32>,
}

pub enum CliError {
    Usage(String),
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

pub type CliResult = Result<(), CliError>;

pub fn emit(machine: bool, doc: &serde_json::Value, human: impl FnOnce() -> String) {
    if machine {
        println!("{}", serde_json::to_string(doc).expect("documents serialize"));
    } else {
        print!("{}", human());
    }
}

pub fn load_kb(path: &Path) -> Result<KnowledgeBase, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("knowledge base not found: {}", path.display())));
    }
    load_knowledge_base(path).map_err(|e| CliError::Usage(e.to_string()))
}

fn validate_kb(path: &Path, machine: bool) -> CliResult {
    if !path.exists() {
        return Err(CliError::Usage(format!("knowledge base not found: {}", path.display())));
    }
    let kb = match load_knowledge_base(path) {
        Ok(kb) => kb,
        Err(e) => {
            let doc = serde_json::json!({"loaded": false, "error": e.to_string()});
            emit(machine, &doc, || format!("error[Load] {}: {e}\n", path.display()));
            return Err(CliError::Failed(String::new()));
        }
    };
    let report = validate_knowledge_base(&kb);
    let errors = report.errors().count();
    let warnings = report.violations.len() - errors;
    let doc = serde_json::json!({"loaded": true, "report": report});
    emit(machine, &doc, || {
        let mut out: String = report.violations.iter().map(|v| format!("{v}\n")).collect();
        out.push_str(&format!("{}: {errors} error(s), {warnings} warning(s)\n", path.display()));
        out
    });
    if report.violations.iter().any(|v| v.severity == Severity::Error) {
        Err(CliError::Failed(String::new()))
    } else {
        Ok(())
    }
}

fn explain(session: &Path, round: u32, machine: bool) -> CliResult {
    let log = SessionLog::open(session).map_err(|e| CliError::Usage(e.to_string()))?;
    let path = log.round_path(round);
    if !path.is_file() {
        return Err(CliError::Usage(format!("session has no round {round}")));
    }
    let rounds = log.read_rounds().map_err(|e| CliError::Usage(e.to_string()))?;
    let entry = rounds
        .iter()
        .find(|r| r.round_index == round)
        .ok_or_else(|| CliError::Usage(format!("round {round} is not readable")))?;
    let Some(trace) = &entry.trace else {
        return Err(CliError::Failed(format!("NoTrace: round {round} took the repair branch")));
    };
    let doc = serde_json::to_value(trace).expect("traces serialize");
    emit(machine, &doc, || {
        let mut out = format!("round {round}: optimize on base {}\n", entry.base_kernel_id.as_deref().unwrap_or("?"));
        out.push_str(&trace.to_string());
        if !out.ends_with('\n') {
            out.push('\n');
        }
        if let Some(rec) = &entry.recommendation {
            out.push_str(&format!(
                "recommended: {}\n",
                serde_json::to_string(rec).expect("recommendations serialize")
            ));
        }
        out
    });
    Ok(())
}

fn parse_profile(ncu: Option<&Path>, nsys: Option<&Path>, machine: bool) -> CliResult {
    if ncu.is_none() && nsys.is_none() {
        return Err(CliError::Usage("give --ncu and/or --nsys".into()));
    }
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())));
    let raw = ncu.map(read).transpose()?.map(|t| parse_ncu_csv(&t));
    let run = nsys.map(read).transpose()?.map(|t| parse_nsys_summary(&t));
    for (what, faults) in [
        ("ncu", raw.as_ref().map(|r| &r.faults)),
        ("nsys", run.as_ref().map(|r| &r.faults)),
    ] {
        for f in faults.into_iter().flatten() {
            eprintln!("warning: {what} {f}");
        }
    }
    let doc = serde_json::json!({"raw_profile": raw, "run_features": run});
    emit(machine, &doc, || format!("{}\n", serde_json::to_string_pretty(&doc).expect("documents serialize")));
    Ok(())
}

pub fn metrics_doc(outcomes: &[TaskOutcome], rounds: u32) -> Result<serde_json::Value, CliError> {
    let overall = compute_metrics(outcomes, rounds).map_err(|e| CliError::Usage(e.to_string()))?;
    let by_level = metrics_by_level(outcomes, rounds).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(serde_json::json!({"overall": overall, "by_level": by_level, "tasks": outcomes}))
}

pub fn render_table(doc: &serde_json::Value) -> String {
    let row = |label: &str, m: &MetricsReport| {
        format!(
            "{label:<8} {:>5} {:>8.4} {:>12.4} {:>7.4} {:>10.4}\n",
            m.tasks, m.success_rate, m.mean_speedup, m.fast1, m.per_round_efficiency
        )
    };
    let mut out = format!("{:<8} {:>5} {:>8} {:>12} {:>7} {:>10}\n", "level", "tasks", "success", "mean_speedup", "fast1", "per_round");
    let by_level: std::collections::BTreeMap<u32, MetricsReport> =
        serde_json::from_value(doc["by_level"].clone()).expect("metrics document");
    for (level, m) in &by_level {
        out.push_str(&row(&level.to_string(), m));
    }
    let overall: MetricsReport = serde_json::from_value(doc["overall"].clone()).expect("metrics document");
    out.push_str(&row("all", &overall));
    out
}

fn report(dir: &Path, rounds: Option<u32>, machine: bool) -> CliResult {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("session.json").is_file()).collect();
    paths.sort();
    let mut outcomes = Vec::new();
    let mut budgets = std::collections::BTreeSet::new();
    for p in &paths {
        let log = SessionLog::open(p).map_err(|e| CliError::Usage(e.to_string()))?;
        let doc = log.read_session().map_err(|e| CliError::Usage(e.to_string()))?;
        budgets.insert(doc.config.max_rounds);
        let result: Option<SessionResult> = log.read_result().map_err(|e| CliError::Usage(e.to_string()))?;
        outcomes.push(match result {
            Some(r) => r.outcome(),
            // Unfinished or aborted sessions count as failures.
            None => TaskOutcome {
                task_id: doc.task.task_id.clone(),
                level: doc.task.level,
                success: false,
                best_speedup: None,
            },
        });
    }
    if outcomes.is_empty() {
        return Err(CliError::Usage(format!("no sessions under {}", dir.display())));
    }
    // Mixed budgets are scored against the largest one.
    let rounds = rounds.unwrap_or_else(|| *budgets.iter().next_back().expect("at least one session"));
    let doc = metrics_doc(&outcomes, rounds)?;
    emit(machine, &doc, || render_table(&doc));
    Ok(())
}

fn replay(session: &Path, scenario: Option<&Path>, kb: &Path, machine: bool) -> CliResult {
    let report = replay_from_logs(session).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut differing_files = Vec::new();
    if let Some(dir) = scenario {
        let kb = load_kb(kb)?;
        let tmp = std::env::temp_dir().join(format!("kerntune-replay-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&tmp);
        run::run_scenario_into(dir, &kb, &tmp).map_err(CliError::Usage)?;
        differing_files = run::compare_dirs(session, &tmp);
        let _ = std::fs::remove_dir_all(&tmp);
    }
    let consistent = report.consistent() && differing_files.is_empty();
    let doc = serde_json::json!({
        "consistent": consistent,
        "rounds": report.rounds,
        "promotion_mismatches": report.promotion_mismatches,
        "state_differences": report.differences,
        "differing_files": differing_files,
    });
    emit(machine, &doc, || {
        let mut out = format!("replayed {} round(s)\n", report.rounds);
        for r in &report.promotion_mismatches {
            out.push_str(&format!("round {r}: logged promotion differs from the re-derived one\n"));
        }
        for d in &report.differences {
            out.push_str(&format!("state field {d} differs from the checkpoint\n"));
        }
        for f in &differing_files {
            out.push_str(&format!("{f} differs from a fresh run\n"));
        }
        out.push_str(if consistent { "consistent\n" } else { "INCONSISTENT\n" });
        out
    });
    if consistent {
        Ok(())
    } else {
        Err(CliError::Failed(String::new()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run::run(args, &cli.kb, cli.machine),
        Command::ValidateKb { path } => validate_kb(path.as_deref().unwrap_or(&cli.kb), cli.machine),
        Command::Explain { session, round } => explain(session, *round, cli.machine),
        Command::ParseProfile { ncu, nsys } => parse_profile(ncu.as_deref(), nsys.as_deref(), cli.machine),
        Command::Report { sessions_dir, rounds } => report(sessions_dir, *rounds, cli.machine),
        Command::Replay { session, scenario } => replay(session, scenario.as_deref(), &cli.kb, cli.machine),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) | CliError::Failed(m) if !m.is_empty() => eprintln!("kerntune: {m}"),
                _ => {}
            }
            ExitCode::from(e.code())
        }
    }
}
