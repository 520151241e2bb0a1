//! Helpers shared by the integration test targets.
//!
//! The oracle here re-implements evaluation from the public expression tree
//! and the raw knowledge-base sections. It deliberately shares no code with
//! the engine beyond the data types.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use kerntune_core::decision::EvidenceBundle;
use kerntune_core::expr::{BinaryOp, Expr, Func};
use kerntune_core::features::CodeFeatureVector;
use kerntune_core::kb::{load_knowledge_base, BoundaryRule, FeatureDomain, KnowledgeBase, VetoCondition};
use kerntune_core::value::Value;
use rand::Rng;

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn load_kb(rel: &str) -> KnowledgeBase {
    load_knowledge_base(&repo_root().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[derive(Debug, Clone, PartialEq)]
enum V {
    N(f64),
    B(bool),
    S(String),
    Absent,
}

fn from_value(v: &Value) -> V {
    match v {
        Value::Number(n) => V::N(*n),
        Value::Bool(b) => V::B(*b),
        Value::Label(s) => V::S(s.clone()),
    }
}

fn to_value(v: &V) -> Option<Value> {
    match v {
        V::N(n) => Some(Value::Number(*n)),
        V::B(b) => Some(Value::Bool(*b)),
        V::S(s) => Some(Value::Label(s.clone())),
        V::Absent => None,
    }
}

fn finite(x: f64) -> V {
    if x.is_finite() {
        V::N(x)
    } else {
        V::Absent
    }
}

/// `None` means a type error; `Some(V::Absent)` a missing result.
fn ev(e: &Expr, env: &BTreeMap<String, Value>) -> Option<V> {
    Some(match e {
        Expr::Num(n) => V::N(*n),
        Expr::Bool(b) => V::B(*b),
        Expr::Str(s) => V::S(s.clone()),
        Expr::Ident(id) => env.get(id).map(from_value).unwrap_or(V::Absent),
        Expr::Neg(x) => match ev(x, env)? {
            V::N(n) => V::N(-n),
            V::Absent => V::Absent,
            _ => return None,
        },
        Expr::Not(x) => match ev(x, env)? {
            V::B(b) => V::B(!b),
            V::Absent => V::Absent,
            _ => return None,
        },
        Expr::Binary(op, l, r) => {
            let (a, b) = (ev(l, env)?, ev(r, env)?);
            match op {
                BinaryOp::And | BinaryOp::Or => {
                    let tri = |v: &V| match v {
                        V::B(b) => Some(Some(*b)),
                        V::Absent => Some(None),
                        _ => None,
                    };
                    let (x, y) = (tri(&a)?, tri(&b)?);
                    let decisive = *op == BinaryOp::Or;
                    if x == Some(decisive) || y == Some(decisive) {
                        V::B(decisive)
                    } else if x.is_some() && y.is_some() {
                        V::B(!decisive)
                    } else {
                        V::Absent
                    }
                }
                BinaryOp::Add | BinaryOp::Sub | BinaryOp::Mul | BinaryOp::Div => match (a, b) {
                    (V::Absent, _) | (_, V::Absent) => V::Absent,
                    (V::N(x), V::N(y)) => match op {
                        BinaryOp::Add => finite(x + y),
                        BinaryOp::Sub => finite(x - y),
                        BinaryOp::Mul => finite(x * y),
                        _ if y == 0.0 => V::Absent,
                        _ => finite(x / y),
                    },
                    _ => return None,
                },
                _ => match (a, b) {
                    (V::Absent, _) | (_, V::Absent) => V::B(false),
                    (V::N(x), V::N(y)) => V::B(match op {
                        BinaryOp::Lt => x < y,
                        BinaryOp::Le => x <= y,
                        BinaryOp::Gt => x > y,
                        BinaryOp::Ge => x >= y,
                        BinaryOp::Eq => x == y,
                        _ => x != y,
                    }),
                    (x, y) if matches!(op, BinaryOp::Eq | BinaryOp::Ne) => {
                        let same_kind = matches!((&x, &y), (V::B(_), V::B(_)) | (V::S(_), V::S(_)));
                        if !same_kind {
                            return None;
                        }
                        V::B((x == y) == (*op == BinaryOp::Eq))
                    }
                    _ => return None,
                },
            }
        }
        Expr::Call(Func::Defined, args) => V::B(!matches!(ev(&args[0], env)?, V::Absent)),
        Expr::Call(f, args) => {
            let mut xs = Vec::new();
            for a in args {
                match ev(a, env)? {
                    V::N(n) => xs.push(n),
                    V::Absent => return Some(V::Absent),
                    _ => return None,
                }
            }
            match f {
                Func::Min => finite(if xs[0] <= xs[1] { xs[0] } else { xs[1] }),
                Func::Max => finite(if xs[0] >= xs[1] { xs[0] } else { xs[1] }),
                _ => {
                    if xs[1] == 0.0 {
                        finite(xs[2])
                    } else {
                        finite(xs[0] / xs[1])
                    }
                }
            }
        }
    })
}

/// Boolean reading: only a definite `true` holds.
pub fn truth(e: &Expr, env: &BTreeMap<String, Value>) -> bool {
    matches!(ev(e, env), Some(V::B(true)))
}

/// Evidence values after normalization and derivation, computed by a
/// fixpoint sweep rather than a topological sort.
pub fn oracle_env(bundle: &EvidenceBundle, kb: &KnowledgeBase) -> BTreeMap<String, Value> {
    let mut env: BTreeMap<String, Value> = BTreeMap::new();
    for e in &kb.field_mapping.entries {
        if let Some(raw) = bundle.raw_metrics.get(&e.raw_metric_name) {
            if raw.is_finite() {
                env.insert(e.standard_field.clone(), Value::Number(raw * e.scale));
            }
        }
    }
    env.extend(bundle.run_features.clone());
    env.extend(bundle.code_features.values.clone());
    let derived: BTreeSet<&str> = kb.derived_fields.iter().map(|d| d.name.as_str()).collect();
    let mut settled: BTreeSet<String> = BTreeSet::new();
    for _ in 0..=kb.derived_fields.len() {
        for d in &kb.derived_fields {
            if settled.contains(&d.name) {
                continue;
            }
            let ready = d
                .expression
                .identifiers()
                .iter()
                .all(|id| !derived.contains(id.as_str()) || settled.contains(id));
            if ready {
                if let Some(v) = ev(&d.expression, &env).as_ref().and_then(to_value) {
                    env.insert(d.name.clone(), v);
                }
                settled.insert(d.name.clone());
            }
        }
    }
    env
}

fn oracle_tier(kb: &KnowledgeBase, env: &BTreeMap<String, Value>, indicator: &str) -> Option<String> {
    let def = kb.headroom_tiers.iter().find(|t| t.indicator == indicator)?;
    let v = env.get(indicator)?.as_number()?;
    for (i, cut) in def.thresholds.iter().enumerate() {
        let below = match def.boundary_rule {
            BoundaryRule::LowerInclusive => v < *cut,
            BoundaryRule::UpperInclusive => v <= *cut,
        };
        if below {
            return Some(def.tier_labels[i].clone());
        }
    }
    def.tier_labels.last().cloned()
}

fn pred(kb: &KnowledgeBase, env: &BTreeMap<String, Value>, name: &str) -> bool {
    kb.predicates
        .iter()
        .find(|p| p.name == name)
        .is_some_and(|p| truth(&p.expression, env))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleOutcome {
    pub matched_case: Option<String>,
    pub methods: Vec<String>,
}

/// Exhaustive matcher: evaluates every (case, gate, veto) combination and
/// then picks the winner by (priority position, rank).
pub fn brute_force(bundle: &EvidenceBundle, kb: &KnowledgeBase) -> OracleOutcome {
    let env = oracle_env(bundle, kb);

    let held_vetoes: Vec<&Vec<String>> = kb
        .vetoes
        .iter()
        .filter(|v| match &v.condition {
            VetoCondition::Predicate(p) => pred(kb, &env, p),
            VetoCondition::Expression(e) => truth(e, &env),
        })
        .map(|v| &v.forbidden_methods)
        .collect();
    let forbidden: BTreeSet<&String> = held_vetoes.into_iter().flatten().collect();

    let mut order: Vec<&str> = Vec::new();
    for o in &kb.priority.overrides {
        if pred(kb, &env, &o.condition) && !order.contains(&o.promote.as_str()) {
            order.push(&o.promote);
        }
    }
    for t in &kb.priority.ordering {
        if !order.contains(&t.as_str()) {
            order.push(t);
        }
    }

    struct Row<'a> {
        position: usize,
        rank: i64,
        case_id: &'a str,
        bottleneck: &'a str,
        surviving: Vec<String>,
    }
    let mut viable: Vec<Row> = Vec::new();
    for c in &kb.decision_table {
        let sig = c.ncu_signature.iter().all(|p| pred(kb, &env, p));
        let head = c.headroom_condition.iter().all(|(ind, ok)| {
            oracle_tier(kb, &env, ind).is_some_and(|t| ok.contains(&t))
        });
        let gate = c.gate_when.iter().all(|p| pred(kb, &env, p));
        if sig && head && gate {
            viable.push(Row {
                position: order.iter().position(|t| *t == c.bottleneck_type).unwrap_or(usize::MAX),
                rank: c.rank,
                case_id: &c.case_id,
                bottleneck: &c.bottleneck_type,
                surviving: c.allowed_methods.iter().filter(|m| !forbidden.contains(m)).cloned().collect(),
            });
        }
    }
    let best_rank: BTreeMap<&str, i64> = viable.iter().fold(BTreeMap::new(), |mut acc, r| {
        let e = acc.entry(r.bottleneck).or_insert(r.rank);
        *e = (*e).min(r.rank);
        acc
    });
    viable.sort_by_key(|r| (r.position, r.rank));
    viable
        .into_iter()
        .find(|r| best_rank[r.bottleneck] == r.rank && !r.surviving.is_empty())
        .map(|r| OracleOutcome {
            matched_case: Some(r.case_id.to_string()),
            methods: r.surviving,
        })
        .unwrap_or(OracleOutcome {
            matched_case: None,
            methods: vec![],
        })
}

/// Forbidden methods of every veto rule whose condition holds.
pub fn held_forbidden(env: &BTreeMap<String, Value>, kb: &KnowledgeBase) -> BTreeSet<String> {
    kb.vetoes
        .iter()
        .filter(|v| match &v.condition {
            VetoCondition::Predicate(p) => pred(kb, env, p),
            VetoCondition::Expression(e) => truth(e, env),
        })
        .flat_map(|v| v.forbidden_methods.iter().cloned())
        .collect()
}

fn literals(e: &Expr, out: &mut Vec<f64>) {
    match e {
        Expr::Num(n) => out.push(*n),
        Expr::Neg(x) | Expr::Not(x) => literals(x, out),
        Expr::Binary(_, l, r) => {
            literals(l, out);
            literals(r, out);
        }
        Expr::Call(_, args) => args.iter().for_each(|a| literals(a, out)),
        _ => {}
    }
}

/// Random bundle whose values cluster on the knowledge base's own cut
/// points, so boundaries are exercised often.
pub fn random_bundle(kb: &KnowledgeBase, rng: &mut impl Rng) -> EvidenceBundle {
    let mut cuts = Vec::new();
    for p in &kb.predicates {
        literals(&p.expression, &mut cuts);
    }
    for t in &kb.headroom_tiers {
        cuts.extend(t.thresholds.iter().copied());
    }
    let pick = |rng: &mut dyn rand::RngCore| -> f64 {
        if !cuts.is_empty() && rng.gen_bool(0.5) {
            let c = cuts[rng.gen_range(0..cuts.len())];
            c + [0.0, 0.5, -0.5, 1e-3][rng.gen_range(0..4)]
        } else {
            (rng.gen_range(0.0..150.0f64) * 4.0).round() / 4.0
        }
    };
    let mut raw = BTreeMap::new();
    for e in &kb.field_mapping.entries {
        if rng.gen_bool(0.85) {
            raw.insert(e.raw_metric_name.clone(), pick(rng) / e.scale);
        }
    }
    if rng.gen_bool(0.3) {
        raw.insert("vendor__unlisted_counter.sum".into(), pick(rng));
    }
    let mut run = BTreeMap::new();
    for f in &kb.run_features_schema.features {
        if !rng.gen_bool(0.85) {
            continue;
        }
        let v = match f.name.as_str() {
            "kernel_launch_count" | "distinct_kernel_count" => rng.gen_range(0..30) as f64,
            _ => [0.005, 0.01, 0.02, 0.05, 0.1, 1.0][rng.gen_range(0..6)],
        };
        run.insert(f.name.clone(), Value::Number(v));
    }
    let mut code = CodeFeatureVector::default();
    for f in &kb.code_features {
        if !rng.gen_bool(0.9) {
            continue;
        }
        let v = match &f.value_domain {
            FeatureDomain::Boolean => Value::Bool(rng.gen_bool(0.5)),
            FeatureDomain::Count => Value::Number(rng.gen_range(0..6) as f64),
            FeatureDomain::Labels { labels } => Value::Label(labels[rng.gen_range(0..labels.len())].clone()),
        };
        code.values.insert(f.name.clone(), v);
    }
    EvidenceBundle {
        raw_metrics: raw,
        run_features: run,
        code_features: code,
    }
}

/// One hand-labeled snippet of the feature corpus.
pub struct CorpusEntry {
    pub name: String,
    pub source: String,
    pub expected: BTreeMap<String, Value>,
}

pub fn feature_corpus() -> Vec<CorpusEntry> {
    let dir = repo_root().join("fixtures/features");
    let mut labels: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    labels.sort();
    labels
        .into_iter()
        .map(|path| {
            let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
            let source_name = doc["source"].as_str().unwrap();
            let expected: BTreeMap<String, Value> = serde_json::from_value(doc["expected"].clone()).unwrap();
            CorpusEntry {
                name: path.file_stem().unwrap().to_string_lossy().into_owned(),
                source: std::fs::read_to_string(dir.join(source_name)).unwrap(),
                expected,
            }
        })
        .collect()
}

pub fn scenario_dirs() -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(repo_root().join("fixtures/scenarios"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.join("scenario.json").is_file())
        .collect();
    dirs.sort();
    dirs
}

pub struct ScenarioRun {
    pub outcome: kerntune_core::orchestrator::SessionOutcome,
    pub agents: kerntune_core::agents::ScriptedBackend,
    pub evaluator: kerntune_core::orchestrator::scripted::ScriptedEvaluator,
}

/// Runs (or, with `resume`, continues) one scenario directory.
pub fn run_scenario(
    dir: &Path,
    kb: &KnowledgeBase,
    log_dir: Option<&Path>,
    control: kerntune_core::orchestrator::RunControl,
    resume: bool,
) -> ScenarioRun {
    use kerntune_core::orchestrator::{resume_session, run_session, scenario::Scenario, Workers};
    let scenario = Scenario::load(dir).unwrap();
    let mut agents = scenario.agents().unwrap();
    let mut evaluator = scenario.evaluator().unwrap();
    let mut workers = Workers {
        agents: &mut agents,
        evaluator: &mut evaluator,
    };
    let outcome = if resume {
        resume_session(log_dir.unwrap(), kb, &mut workers, control)
    } else {
        run_session(&scenario.task, &scenario.config, kb, &mut workers, log_dir, control)
    }
    .unwrap_or_else(|e| panic!("{}: {e}", dir.display()));
    ScenarioRun {
        outcome,
        agents,
        evaluator,
    }
}

/// Every file under `dir`, relative path to contents.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn approx(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9 * y.abs().max(1.0),
        (None, None) => true,
        _ => false,
    }
}

/// Compares a finished scenario against its hand-traced `expected.json`;
/// returns one line per mismatch.
pub fn golden_mismatches(dir: &Path, run: &ScenarioRun, log_dir: &Path) -> Vec<String> {
    use kerntune_core::agents::{FaultKind, Role};
    use kerntune_core::orchestrator::SessionLog;
    use kerntune_core::trajectory::AttemptOutcome;
    use serde_json::Value as J;

    let expected: J = serde_json::from_str(&std::fs::read_to_string(dir.join("expected.json")).unwrap()).unwrap();
    let mut bad = Vec::new();
    let mut check = |ok: bool, what: String| {
        if !ok {
            bad.push(what);
        }
    };
    let result = run.outcome.clone().completed().expect("scenario completes");
    let state = &result.state;
    let log = SessionLog::open(log_dir).unwrap();
    let seeds = log.read_seeds().unwrap();
    let rounds = log.read_rounds().unwrap();
    let f = |v: &J| v.as_f64();
    let s = |v: &J| v.as_str().map(str::to_string);

    let choice = serde_json::to_value(seeds.choice).unwrap();
    check(choice == expected["seed_choice"], format!("seed choice {choice} != {}", expected["seed_choice"]));
    check(result.success == expected["success"].as_bool().unwrap(), format!("success {}", result.success));
    check(state.base_kernel_id == s(&expected["base_kernel_id"]), format!("base {:?}", state.base_kernel_id));
    check(state.best_kernel_id == s(&expected["best_kernel_id"]), format!("best {:?}", state.best_kernel_id));
    if state.base_kernel_id.is_some() {
        check(approx(Some(state.speedup_base), f(&expected["speedup_base"])), format!("speedup_base {}", state.speedup_base));
    }
    check(approx(result.best_speedup, f(&expected["speedup_best"])), format!("best speedup {:?}", result.best_speedup));

    let exp_rounds = expected["rounds"].as_array().unwrap();
    check(rounds.len() == exp_rounds.len(), format!("{} rounds logged, {} expected", rounds.len(), exp_rounds.len()));
    for (r, e) in rounds.iter().zip(exp_rounds) {
        let i = r.round_index;
        check(u64::from(i) == e["round"].as_u64().unwrap(), format!("round index {i}"));
        check(serde_json::to_value(r.branch).unwrap() == e["branch"], format!("round {i}: branch {:?}", r.branch));
        check(r.record.kernel_id == s(&e["kernel_id"]), format!("round {i}: kernel {:?}", r.record.kernel_id));
        check(r.record.passed() == e["passed"].as_bool().unwrap(), format!("round {i}: passed {}", r.record.passed()));
        let promo = serde_json::to_value(r.promotion).unwrap();
        check(promo == e["promotion"], format!("round {i}: promotion {promo} != {}", e["promotion"]));
        check(
            approx(r.record.profile.as_ref().map(|p| p.speedup), f(&e["speedup"])),
            format!("round {i}: speedup {:?}", r.record.profile.as_ref().map(|p| p.speedup)),
        );
    }

    let exp_chains = expected["chains"].as_array().unwrap();
    check(state.chains.len() == exp_chains.len(), format!("{} chains", state.chains.len()));
    for (c, e) in state.chains.iter().zip(exp_chains) {
        let attempts: Vec<J> = c.attempts.iter().map(|a| a.kernel_id.clone().into()).collect();
        check(
            c.origin_kernel_id == e["origin"]
                && u64::from(c.origin_round) == e["origin_round"].as_u64().unwrap()
                && J::from(attempts.clone()) == e["attempts"]
                && c.open == e["open"].as_bool().unwrap(),
            format!("chain {} (round {}) {:?} open={}", c.origin_kernel_id, c.origin_round, attempts, c.open),
        );
    }

    let exp_hist = expected["histories"].as_object().unwrap();
    let keys: Vec<&String> = state.histories.keys().collect();
    check(keys == exp_hist.keys().collect::<Vec<_>>(), format!("history bases {keys:?}"));
    for (base, entries) in exp_hist {
        let Some(h) = state.histories.get(base) else { continue };
        let entries = entries.as_array().unwrap();
        check(h.entries.len() == entries.len(), format!("history {base}: {} entries", h.entries.len()));
        for (got, e) in h.entries.iter().zip(entries) {
            let speedup = match got.outcome {
                AttemptOutcome::Speedup { speedup } => Some(speedup),
                AttemptOutcome::Failure { .. } => None,
            };
            check(
                u64::from(got.round_index) == e["round"].as_u64().unwrap()
                    && got.method == e["method"]
                    && approx(speedup, f(&e["speedup"]))
                    && approx(got.repaired_speedup, e.get("repaired_speedup").and_then(J::as_f64)),
                format!("history {base}: round {} {} {speedup:?} repaired {:?}", got.round_index, got.method, got.repaired_speedup),
            );
        }
    }

    if let Some(sizes) = expected.get("avoid_list_sizes").and_then(J::as_object) {
        for (round, n) in sizes {
            let r = &rounds[round.parse::<usize>().unwrap() - 1];
            let got = r.repair_plan.as_ref().map_or(usize::MAX, |p| p.avoid_list.len());
            check(got as u64 == n.as_u64().unwrap(), format!("round {round}: avoid list of {got}"));
        }
    }
    if let Some(ctx) = expected.get("planner_context_rounds").and_then(J::as_object) {
        let re = regex::Regex::new(r"(?m)^- round (\d+):").unwrap();
        for (round, want) in ctx {
            let r: u32 = round.parse().unwrap();
            let call = run.agents.calls().iter().find(|c| c.role == Role::Planner && c.round == Some(r) && c.attempt == 1);
            let got: Vec<J> = call
                .map(|c| re.captures_iter(&c.prompt).map(|m| J::from(m[1].parse::<u64>().unwrap())).collect())
                .unwrap_or_default();
            check(J::from(got.clone()) == *want, format!("round {round}: planner saw rounds {got:?}"));
        }
    }
    if let Some(list) = expected.get("fallback_rounds").and_then(J::as_array) {
        for r in list {
            let log = &rounds[r.as_u64().unwrap() as usize - 1];
            check(log.plan.as_ref().is_some_and(|p| p.is_fallback()), format!("round {r}: plan is not fallback"));
        }
    }
    if let Some(list) = expected.get("plan_validation_faults").and_then(J::as_array) {
        let got: Vec<J> = rounds
            .iter()
            .filter(|r| r.faults.iter().any(|f| f.kind == FaultKind::PlanValidation))
            .map(|r| J::from(r.round_index))
            .collect();
        check(J::from(got.clone()) == J::from(list.clone()), format!("plan validation faults in rounds {got:?}"));
    }
    if let Some(list) = expected.get("shell_violation_rounds").and_then(J::as_array) {
        let got: Vec<J> = rounds
            .iter()
            .filter(|r| r.record.compile.feedback.starts_with("shell violation"))
            .map(|r| J::from(r.round_index))
            .collect();
        check(J::from(got.clone()) == J::from(list.clone()), format!("shell violations in rounds {got:?}"));
    }
    let calls: Vec<J> = run.evaluator.calls().iter().map(|c| serde_json::json!([c.kernel_id, c.profile])).collect();
    check(J::from(calls.clone()) == expected["evaluator_calls"], format!("evaluator calls {}", J::from(calls)));
    bad
}

/// One seeded knowledge-base defect and the violation code it must raise.
pub struct KbMutation {
    pub id: String,
    pub expect: String,
    /// The mutated knowledge base, or why it could not be loaded.
    pub kb: Result<KnowledgeBase, String>,
}

fn apply_op(doc: &mut serde_json::Value, op: &serde_json::Value) {
    let path = op["path"].as_str().unwrap();
    let value = op.get("value").cloned().unwrap_or(serde_json::Value::Null);
    match op["op"].as_str().unwrap() {
        "set" => *doc.pointer_mut(path).unwrap_or_else(|| panic!("no {path}")) = value,
        "append" => doc.pointer_mut(path).unwrap().as_array_mut().unwrap().push(value),
        "remove" => {
            let (parent, idx) = path.rsplit_once('/').unwrap();
            doc.pointer_mut(parent).unwrap().as_array_mut().unwrap().remove(idx.parse().unwrap());
        }
        "remove_where" => {
            let key = op["key"].as_str().unwrap();
            doc.pointer_mut(path).unwrap().as_array_mut().unwrap().retain(|item| item[key] != value);
        }
        other => panic!("unknown mutation op {other}"),
    }
}

/// Applies every entry of a mutation file to a fresh copy of its base KB.
pub fn kb_mutations(rel: &str) -> Vec<KbMutation> {
    let root = repo_root().join("fixtures");
    let suite: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join(rel)).unwrap()).unwrap();
    let base = root.join(suite["base"].as_str().unwrap());
    suite["mutations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| {
            let dir = tempfile::tempdir().unwrap();
            let mut docs: BTreeMap<String, serde_json::Value> = BTreeMap::new();
            for e in std::fs::read_dir(&base).unwrap() {
                let p = e.unwrap().path();
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                docs.insert(name, serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap());
            }
            for op in m["ops"].as_array().unwrap() {
                apply_op(docs.get_mut(op["file"].as_str().unwrap()).unwrap(), op);
            }
            for (name, doc) in &docs {
                std::fs::write(dir.path().join(name), serde_json::to_string_pretty(doc).unwrap()).unwrap();
            }
            KbMutation {
                id: m["id"].as_str().unwrap().to_string(),
                expect: m["expect"].as_str().unwrap().to_string(),
                kb: load_knowledge_base(dir.path()).map_err(|e| e.to_string()),
            }
        })
        .collect()
}

/// Why a mutation was not caught as expected, if it wasn't.
pub fn mutation_miss(m: &KbMutation) -> Option<String> {
    use kerntune_core::kb::validate_knowledge_base;
    let kb = match &m.kb {
        Ok(kb) => kb,
        Err(e) => return Some(format!("{}: did not load: {e}", m.id)),
    };
    let report = validate_knowledge_base(kb);
    let codes: Vec<String> = report.errors().map(|v| v.code.to_string()).collect();
    if codes.contains(&m.expect) {
        None
    } else {
        Some(format!("{}: expected error {}, got {codes:?}", m.id, m.expect))
    }
}

fn profile_goldens(prefix: &str) -> Vec<(PathBuf, serde_json::Value)> {
    let dir = repo_root().join("fixtures/profiles");
    let mut out: Vec<(PathBuf, serde_json::Value)> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let n = p.file_name().unwrap().to_string_lossy();
            n.starts_with(prefix) && n.ends_with(".golden.json")
        })
        .map(|p| {
            let csv = PathBuf::from(p.to_string_lossy().replace(".golden.json", ".csv"));
            (csv, serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap())
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

fn metrics_match(got: &BTreeMap<String, f64>, want: &serde_json::Value) -> Result<(), String> {
    let want = want.as_object().unwrap();
    if got.len() != want.len() {
        return Err(format!("{} metrics, expected {}", got.len(), want.len()));
    }
    for (k, v) in want {
        let g = got.get(k).ok_or_else(|| format!("missing {k}"))?;
        if !close(*g, v.as_f64().unwrap()) {
            return Err(format!("{k}: {g} != {v}"));
        }
    }
    Ok(())
}

fn fault_lines(faults: &[kerntune_core::profiling::ParseFault], golden: &serde_json::Value) -> Result<(), String> {
    let got: Vec<u64> = faults.iter().map(|f| f.line).collect();
    let want: Vec<u64> = golden["fault_lines"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    if got == want {
        Ok(())
    } else {
        Err(format!("fault lines {got:?}, expected {want:?}"))
    }
}

/// Compares every shipped kernel-profiler export with its golden document.
/// Returns (exports checked, mismatches).
pub fn ncu_golden_mismatches() -> (usize, Vec<String>) {
    use kerntune_core::profiling::parse_ncu_csv;
    let all = profile_goldens("ncu_");
    let mut out = Vec::new();
    for (csv, golden) in &all {
        let text = std::fs::read_to_string(csv).unwrap();
        let p = parse_ncu_csv(&text);
        let name = csv.file_name().unwrap().to_string_lossy();
        let kernels = golden["kernels"].as_array().unwrap();
        if p.per_kernel.len() != kernels.len() {
            out.push(format!("{name}: {} kernels, expected {}", p.per_kernel.len(), kernels.len()));
            continue;
        }
        for (k, w) in p.per_kernel.iter().zip(kernels) {
            if k.kernel_name != w["name"].as_str().unwrap() || k.launches as u64 != w["launches"].as_u64().unwrap() {
                out.push(format!("{name}: kernel {} x{} differs from {w}", k.kernel_name, k.launches));
            }
            if let Err(e) = metrics_match(&k.metrics, &w["metrics"]) {
                out.push(format!("{name} {}: {e}", k.kernel_name));
            }
            // Nothing may appear that the export does not contain.
            for m in k.metrics.keys() {
                if !text.contains(m.as_str()) {
                    out.push(format!("{name}: fabricated metric {m}"));
                }
            }
        }
        if let Err(e) = metrics_match(&p.aggregate, &golden["aggregate"]) {
            out.push(format!("{name} aggregate: {e}"));
        }
        if let Err(e) = fault_lines(&p.faults, golden) {
            out.push(format!("{name}: {e}"));
        }
    }
    (all.len(), out)
}

/// Same for the system-profiler kernel summaries.
pub fn nsys_golden_mismatches() -> (usize, Vec<String>) {
    use kerntune_core::profiling::parse_nsys_summary;
    let all = profile_goldens("nsys_");
    let mut out = Vec::new();
    for (csv, golden) in &all {
        let r = parse_nsys_summary(&std::fs::read_to_string(csv).unwrap());
        let name = csv.file_name().unwrap().to_string_lossy();
        let want = golden["values"].as_object().unwrap();
        if r.values.len() != want.len() {
            out.push(format!("{name}: {} values, expected {}", r.values.len(), want.len()));
        }
        for (k, v) in want {
            match r.values.get(k) {
                Some(Value::Number(g)) if close(*g, v.as_f64().unwrap()) => {}
                other => out.push(format!("{name}: {k} {other:?} != {v}")),
            }
        }
        if let Err(e) = fault_lines(&r.faults, golden) {
            out.push(format!("{name}: {e}"));
        }
    }
    (all.len(), out)
}
