//! The `run` subcommand: builds one job per task, runs the jobs (optionally
//! in parallel), and writes per-session logs plus a metrics summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Args;
use kerntune_core::agents::{HttpBackend, HttpConfig, ReasoningBackend, ScriptedBackend};
use kerntune_core::kb::KnowledgeBase;
use kerntune_core::orchestrator::harness::HarnessEvaluator;
use kerntune_core::orchestrator::scenario::Scenario;
use kerntune_core::orchestrator::scripted::ScriptedEvaluator;
use kerntune_core::orchestrator::{
    resume_session, run_parallel, run_session, EvaluationBackend, RunControl, SessionConfig, SessionOutcome,
    SessionResult, TaskManifest, TaskOutcome, TaskSpec, Workers,
};

use crate::{emit, load_kb, metrics_doc, render_table, BackendKind, CliError, CliResult, EvaluatorKind, Knobs};

#[derive(Args)]
pub struct RunArgs {
    /// Task manifest (JSON list of tasks with reference files).
    #[arg(long, conflicts_with = "scenarios")]
    manifest: Option<PathBuf>,
    /// Scenario directory (repeatable); carries its own task, config and fixtures.
    #[arg(long = "scenario")]
    scenarios: Vec<PathBuf>,
    #[command(flatten)]
    knobs: Knobs,
    /// Reasoning backend for the agents.
    #[arg(long, value_enum, default_value_t = BackendKind::Scripted)]
    backend: BackendKind,
    /// Scripted agent responses: a file, or a directory of `<task_id>.json`.
    #[arg(long)]
    agents_fixture: Option<PathBuf>,
    /// Where candidate kernels are compiled, checked and timed.
    #[arg(long, value_enum, default_value_t = EvaluatorKind::Scripted)]
    evaluator: EvaluatorKind,
    /// Scripted evaluator outcomes: a file, or a directory of `<task_id>.json`.
    #[arg(long)]
    evaluator_fixture: Option<PathBuf>,
    /// Harness command line, split on whitespace (program first).
    #[arg(long)]
    harness: Option<String>,
    /// Seconds to wait for one harness reply.
    #[arg(long, default_value_t = 1800)]
    harness_timeout: u64,
    /// One sub-directory per task is created here.
    #[arg(long, default_value = "sessions")]
    sessions_dir: PathBuf,
    /// Sessions run concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Replace existing session directories.
    #[arg(long, conflicts_with = "resume")]
    overwrite: bool,
    /// Continue existing sessions from their last completed round.
    #[arg(long)]
    resume: bool,
    /// Stop every session after this many rounds (it can be resumed later).
    #[arg(long)]
    stop_after: Option<u32>,
}

enum AgentSource {
    Scripted(PathBuf),
    Http(HttpConfig),
}

enum EvaluatorSource {
    Scripted(PathBuf),
    Harness(Vec<String>),
}

struct Job {
    task: TaskSpec,
    config: SessionConfig,
    agents: AgentSource,
    evaluator: EvaluatorSource,
    log_dir: PathBuf,
}

fn apply(knobs: &Knobs, mut config: SessionConfig) -> SessionConfig {
    if let Some(v) = knobs.rounds {
        config.max_rounds = v;
    }
    if let Some(v) = knobs.seeds {
        config.seed_count = v;
    }
    if let Some(v) = knobs.rt {
        config.rt = v;
    }
    if let Some(v) = knobs.at {
        config.at = v;
    }
    if let Some(v) = knobs.tolerance {
        config.tolerance_abs = v;
        config.tolerance_rel = v;
    }
    if let Some(v) = knobs.trials {
        config.trials = v;
    }
    config
}

fn per_task(path: &Path, task_id: &str) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{task_id}.json"))
    } else {
        path.to_path_buf()
    }
}

fn build_jobs(args: &RunArgs) -> Result<Vec<Job>, CliError> {
    let usage = |e: &dyn std::fmt::Display| CliError::Usage(e.to_string());
    let http = match args.backend {
        BackendKind::Http => Some(HttpConfig::from_env().map_err(|e| usage(&e))?),
        BackendKind::Scripted => None,
    };
    let harness = match (args.evaluator, &args.harness) {
        (EvaluatorKind::Harness, Some(cmd)) => {
            let parts: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if parts.is_empty() {
                return Err(CliError::Usage("--harness is empty".into()));
            }
            Some(parts)
        }
        (EvaluatorKind::Harness, None) => return Err(CliError::Usage("--evaluator harness needs --harness".into())),
        (EvaluatorKind::Scripted, _) => None,
    };
    // (task, config, default fixture directory)
    let mut tasks: Vec<(TaskSpec, SessionConfig, Option<PathBuf>)> = Vec::new();
    if let Some(manifest) = &args.manifest {
        for t in TaskManifest::load(manifest).map_err(|e| usage(&e))? {
            tasks.push((t, apply(&args.knobs, SessionConfig::default()), None));
        }
    } else if !args.scenarios.is_empty() {
        for dir in &args.scenarios {
            let s = Scenario::load(dir).map_err(|e| usage(&e))?;
            tasks.push((s.task, apply(&args.knobs, s.config), Some(s.dir)));
        }
    } else {
        return Err(CliError::Usage("give --manifest or at least one --scenario".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut jobs = Vec::new();
    for (task, config, scenario_dir) in tasks {
        config.validate().map_err(|e| CliError::Usage(format!("{}: {e}", task.task_id)))?;
        if !seen.insert(task.task_id.clone()) {
            return Err(CliError::Usage(format!("task {} appears twice", task.task_id)));
        }
        let fixture = |explicit: &Option<PathBuf>, name: &str, flag: &str| -> Result<PathBuf, CliError> {
            match (explicit, &scenario_dir) {
                (Some(p), _) => Ok(per_task(p, &task.task_id)),
                (None, Some(d)) => Ok(d.join(name)),
                (None, None) => Err(CliError::Usage(format!("scripted runs from a manifest need {flag}"))),
            }
        };
        let agents = match &http {
            Some(c) => AgentSource::Http(c.clone()),
            None => AgentSource::Scripted(fixture(&args.agents_fixture, "agents.json", "--agents-fixture")?),
        };
        let evaluator = match &harness {
            Some(cmd) => EvaluatorSource::Harness(cmd.clone()),
            None => EvaluatorSource::Scripted(fixture(&args.evaluator_fixture, "evaluator.json", "--evaluator-fixture")?),
        };
        let log_dir = args.sessions_dir.join(&task.task_id);
        jobs.push(Job { task, config, agents, evaluator, log_dir });
    }
    Ok(jobs)
}

fn execute(job: &Job, kb: &KnowledgeBase, resume: bool, control: RunControl, timeout: Duration) -> Result<SessionOutcome, String> {
    let mut agents: Box<dyn ReasoningBackend> = match &job.agents {
        AgentSource::Scripted(p) => Box::new(ScriptedBackend::from_file(p).map_err(|e| e.to_string())?),
        AgentSource::Http(c) => Box::new(HttpBackend::new(c.clone())),
    };
    let mut evaluator: Box<dyn EvaluationBackend> = match &job.evaluator {
        EvaluatorSource::Scripted(p) => Box::new(ScriptedEvaluator::from_file(p).map_err(|e| e.to_string())?),
        EvaluatorSource::Harness(cmd) => {
            Box::new(HarnessEvaluator::spawn(&cmd[0], &cmd[1..], timeout).map_err(|e| e.to_string())?)
        }
    };
    let mut workers = Workers {
        agents: agents.as_mut(),
        evaluator: evaluator.as_mut(),
    };
    let outcome = if resume && job.log_dir.join("session.json").is_file() {
        resume_session(&job.log_dir, kb, &mut workers, control)
    } else {
        run_session(&job.task, &job.config, kb, &mut workers, Some(&job.log_dir), control)
    };
    outcome.map_err(|e| e.to_string())
}

/// Re-runs a scenario with its own fixtures, logging into `out`.
pub fn run_scenario_into(dir: &Path, kb: &KnowledgeBase, out: &Path) -> Result<(), String> {
    let s = Scenario::load(dir).map_err(|e| e.to_string())?;
    let job = Job {
        agents: AgentSource::Scripted(s.dir.join("agents.json")),
        evaluator: EvaluatorSource::Scripted(s.dir.join("evaluator.json")),
        task: s.task,
        config: s.config,
        log_dir: out.to_path_buf(),
    };
    execute(&job, kb, false, RunControl::default(), Duration::from_secs(1)).map(|_| ())
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let Ok(entries) = std::fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(base, &p, out);
            } else if let Ok(bytes) = std::fs::read(&p) {
                let rel = p.strip_prefix(base).expect("under base").to_string_lossy().into_owned();
                out.insert(rel, bytes);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Relative paths that are missing on one side or differ in content.
pub fn compare_dirs(a: &Path, b: &Path) -> Vec<String> {
    let (fa, fb) = (files(a), files(b));
    let mut names: Vec<&String> = fa.keys().chain(fb.keys()).collect();
    names.sort();
    names.dedup();
    names.into_iter().filter(|n| fa.get(*n) != fb.get(*n)).cloned().collect()
}

pub fn run(args: &RunArgs, kb_path: &Path, machine: bool) -> CliResult {
    let kb = load_kb(kb_path)?;
    let report = kerntune_core::kb::validate_knowledge_base(&kb);
    if report.has_errors() {
        for v in report.errors() {
            eprintln!("{v}");
        }
        return Err(CliError::Usage(format!("knowledge base {} has errors", kb_path.display())));
    }
    let jobs = build_jobs(args)?;
    for job in &jobs {
        if job.log_dir.join("session.json").exists() {
            if args.overwrite {
                std::fs::remove_dir_all(&job.log_dir)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", job.log_dir.display())))?;
            } else if !args.resume {
                return Err(CliError::Usage(format!(
                    "{} already holds a session; pass --resume or --overwrite",
                    job.log_dir.display()
                )));
            }
        }
    }
    std::fs::create_dir_all(&args.sessions_dir)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.sessions_dir.display())))?;

    let base = apply(&args.knobs, SessionConfig::default());
    if !machine {
        println!("config: {}", base.header());
        for job in &jobs {
            if job.config != base {
                println!("config[{}]: {}", job.task.task_id, job.config.header());
            }
        }
    }

    let control = RunControl { stop_after: args.stop_after };
    let timeout = Duration::from_secs(args.harness_timeout);
    let results = run_parallel(&jobs, args.parallel, |job| execute(job, &kb, args.resume, control, timeout));

    let mut outcomes = Vec::new();
    let mut sessions = Vec::new();
    let mut aborted = 0usize;
    let mut interrupted = 0usize;
    for (job, r) in jobs.iter().zip(&results) {
        let id = &job.task.task_id;
        let entry = match r {
            Ok(SessionOutcome::Completed(res)) => {
                outcomes.push(res.outcome());
                if !machine {
                    println!("{}", task_line(res));
                }
                serde_json::json!({"task_id": id, "status": "completed", "result": res})
            }
            Ok(SessionOutcome::Interrupted { after_round }) => {
                interrupted += 1;
                if !machine {
                    println!("task {id}: stopped after round {after_round}");
                }
                serde_json::json!({"task_id": id, "status": "interrupted", "after_round": after_round})
            }
            Err(e) => {
                aborted += 1;
                outcomes.push(TaskOutcome {
                    task_id: id.clone(),
                    level: job.task.level,
                    success: false,
                    best_speedup: None,
                });
                eprintln!("task {id}: aborted: {e}");
                serde_json::json!({"task_id": id, "status": "aborted", "error": e})
            }
        };
        sessions.push(entry);
    }

    let configs: BTreeMap<&str, &SessionConfig> = jobs.iter().map(|j| (j.task.task_id.as_str(), &j.config)).collect();
    let mut doc = serde_json::json!({"config": base, "task_configs": configs, "sessions": sessions});
    if !outcomes.is_empty() {
        let rounds = jobs.iter().map(|j| j.config.max_rounds).max().unwrap_or(base.max_rounds);
        let metrics = metrics_doc(&outcomes, rounds)?;
        let path = args.sessions_dir.join("metrics.json");
        let text = serde_json::to_string_pretty(&metrics).expect("documents serialize") + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
        if !machine {
            print!("{}", render_table(&metrics));
        }
        doc["metrics"] = metrics;
    }
    emit(machine, &doc, String::new);
    if aborted > 0 {
        return Err(CliError::Failed(format!("{aborted} session(s) aborted")));
    }
    if interrupted > 0 && !machine {
        println!("{interrupted} session(s) can be continued with --resume");
    }
    Ok(())
}

fn task_line(r: &SessionResult) -> String {
    match (&r.best_kernel_id, r.best_speedup) {
        (Some(k), Some(s)) => format!(
            "task {} (level {}): best {k} at {s:.4}x after {} round(s)",
            r.task_id, r.level, r.rounds_used
        ),
        _ => format!(
            "task {} (level {}): {} after {} round(s), no passing kernel",
            r.task_id,
            r.level,
            if r.success { "success" } else { "failed" },
            r.rounds_used
        ),
    }
}
