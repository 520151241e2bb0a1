use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::*;
use crate::expr::{BinaryOp, Expr, Func};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationCode {
    DanglingReference,
    CyclicDependency,
    DuplicateIdentifier,
    DuplicateRank,
    UncoveredBottleneck,
    OrphanMethod,
    InvalidThresholds,
    InvalidScale,
    DomainViolation,
    ModeMismatch,
    InvalidPattern,
    EmptyMethodList,
    IncompleteOrdering,
    TypeMismatch,
    ReservedIdentifier,
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub severity: Severity,
    /// Section-relative path, e.g. `decision_table[3].gate_when[0]`.
    pub location: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}[{}] {}: {}", self.code, self.location, self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.violations.iter().any(|v| v.severity == Severity::Error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.severity == Severity::Error)
    }

    pub fn codes(&self) -> BTreeSet<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }

    fn error(&mut self, code: ViolationCode, location: impl Into<String>, detail: impl Into<String>) {
        self.violations.push(Violation {
            code,
            severity: Severity::Error,
            location: location.into(),
            detail: detail.into(),
        });
    }

    fn warn(&mut self, code: ViolationCode, location: impl Into<String>, detail: impl Into<String>) {
        self.violations.push(Violation {
            code,
            severity: Severity::Warning,
            location: location.into(),
            detail: detail.into(),
        });
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cyclic dependency among derived fields: {}", .0.join(" -> "))]
pub struct CyclicDependency(pub Vec<String>);

/// Topological order of derived fields: each field follows every derived
/// field it reads. Ties keep declaration order.
pub fn resolve_evaluation_order(kb: &KnowledgeBase) -> Result<Vec<String>, CyclicDependency> {
    let names: BTreeSet<&str> = kb.derived_fields.iter().map(|d| d.name.as_str()).collect();
    let deps: Vec<(&str, Vec<String>)> = kb
        .derived_fields
        .iter()
        .map(|d| {
            let reads = d
                .expression
                .identifiers()
                .into_iter()
                .filter(|id| names.contains(id.as_str()))
                .collect();
            (d.name.as_str(), reads)
        })
        .collect();
    let index: BTreeMap<&str, usize> = deps.iter().enumerate().map(|(i, (n, _))| (*n, i)).collect();

    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut marks = vec![Mark::New; deps.len()];
    let mut order = Vec::with_capacity(deps.len());

    fn visit(
        i: usize,
        deps: &[(&str, Vec<String>)],
        index: &BTreeMap<&str, usize>,
        marks: &mut [Mark],
        stack: &mut Vec<usize>,
        order: &mut Vec<String>,
    ) -> Result<(), CyclicDependency> {
        match marks[i] {
            Mark::Done => return Ok(()),
            Mark::Active => {
                let start = stack.iter().position(|&s| s == i).unwrap_or(0);
                let mut cycle: Vec<String> =
                    stack[start..].iter().map(|&s| deps[s].0.to_string()).collect();
                cycle.push(deps[i].0.to_string());
                return Err(CyclicDependency(cycle));
            }
            Mark::New => {}
        }
        marks[i] = Mark::Active;
        stack.push(i);
        for dep in &deps[i].1 {
            visit(index[dep.as_str()], deps, index, marks, stack, order)?;
        }
        stack.pop();
        marks[i] = Mark::Done;
        order.push(deps[i].0.to_string());
        Ok(())
    }

    let mut stack = Vec::new();
    for i in 0..deps.len() {
        visit(i, &deps, &index, &mut marks, &mut stack, &mut order)?;
    }
    Ok(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ty {
    Number,
    Bool,
    Label,
    Unknown,
}

impl Ty {
    fn name(self) -> &'static str {
        match self {
            Ty::Number => "number",
            Ty::Bool => "boolean",
            Ty::Label => "label",
            Ty::Unknown => "unknown",
        }
    }
}

fn infer(expr: &Expr, env: &BTreeMap<String, Ty>, problems: &mut Vec<String>) -> Ty {
    let expect = |got: Ty, want: Ty, what: &str, problems: &mut Vec<String>| {
        if got != want && got != Ty::Unknown {
            problems.push(format!("{what} expects {} but got {}", want.name(), got.name()));
        }
    };
    match expr {
        Expr::Num(_) => Ty::Number,
        Expr::Bool(_) => Ty::Bool,
        Expr::Str(_) => Ty::Label,
        Expr::Ident(name) => env.get(name).copied().unwrap_or(Ty::Unknown),
        Expr::Neg(inner) => {
            let t = infer(inner, env, problems);
            expect(t, Ty::Number, "unary '-'", problems);
            Ty::Number
        }
        Expr::Not(inner) => {
            let t = infer(inner, env, problems);
            expect(t, Ty::Bool, "'not'", problems);
            Ty::Bool
        }
        Expr::Binary(op, lhs, rhs) => {
            let l = infer(lhs, env, problems);
            let r = infer(rhs, env, problems);
            let sym = format!("'{}'", op.symbol());
            match op {
                BinaryOp::And | BinaryOp::Or => {
                    expect(l, Ty::Bool, &sym, problems);
                    expect(r, Ty::Bool, &sym, problems);
                    Ty::Bool
                }
                BinaryOp::Eq | BinaryOp::Ne => {
                    if l != Ty::Unknown && r != Ty::Unknown && l != r {
                        problems.push(format!("{sym} compares {} with {}", l.name(), r.name()));
                    }
                    Ty::Bool
                }
                op if op.is_comparison() => {
                    expect(l, Ty::Number, &sym, problems);
                    expect(r, Ty::Number, &sym, problems);
                    Ty::Bool
                }
                _ => {
                    expect(l, Ty::Number, &sym, problems);
                    expect(r, Ty::Number, &sym, problems);
                    Ty::Number
                }
            }
        }
        Expr::Call(Func::Defined, _) => Ty::Bool,
        Expr::Call(func, args) => {
            for a in args {
                let t = infer(a, env, problems);
                expect(t, Ty::Number, func.name(), problems);
            }
            Ty::Number
        }
    }
}

fn duplicates<'a>(
    report: &mut ValidationReport,
    section: &str,
    kind: &str,
    names: impl IntoIterator<Item = &'a str>,
) {
    let mut seen = BTreeSet::new();
    for (i, name) in names.into_iter().enumerate() {
        if !seen.insert(name) {
            report.error(
                ViolationCode::DuplicateIdentifier,
                format!("{section}[{i}]"),
                format!("duplicate {kind} {name:?}"),
            );
        }
    }
}

/// Checks every cross-reference and structural invariant. An empty report
/// means the knowledge base is safe to use for decisions.
pub fn validate_knowledge_base(kb: &KnowledgeBase) -> ValidationReport {
    use ViolationCode::*;
    let mut report = ValidationReport::default();

    // Identifier uniqueness.
    duplicates(
        &mut report,
        "field_mapping",
        "standard field",
        kb.field_mapping.entries.iter().map(|e| e.standard_field.as_str()),
    );
    duplicates(
        &mut report,
        "field_mapping",
        "raw metric name",
        kb.field_mapping.entries.iter().map(|e| e.raw_metric_name.as_str()),
    );
    duplicates(
        &mut report,
        "run_features_schema",
        "run feature",
        kb.run_features_schema.features.iter().map(|f| f.name.as_str()),
    );
    duplicates(&mut report, "code_features", "code feature", kb.code_features.iter().map(|f| f.name.as_str()));
    duplicates(&mut report, "derived_fields", "derived field", kb.derived_fields.iter().map(|f| f.name.as_str()));
    duplicates(&mut report, "headroom_tiers", "tiered indicator", kb.headroom_tiers.iter().map(|t| t.indicator.as_str()));
    duplicates(&mut report, "ncu_predicates", "predicate", kb.predicates.iter().map(|p| p.name.as_str()));
    duplicates(&mut report, "global_forbidden_rules", "veto rule", kb.vetoes.iter().map(|v| v.name.as_str()));
    duplicates(&mut report, "decision_table", "case id", kb.decision_table.iter().map(|c| c.case_id.as_str()));
    duplicates(&mut report, "llm_assist", "method id", kb.methods.iter().map(|m| m.method_id.as_str()));
    duplicates(
        &mut report,
        "bottleneck_priority_rules.bottleneck_types",
        "bottleneck type",
        kb.bottleneck_types.iter().map(String::as_str),
    );

    // Evidence identifiers share one namespace across their four sources.
    let mut namespace: BTreeMap<&str, &str> = BTreeMap::new();
    let sources = kb
        .field_mapping
        .entries
        .iter()
        .map(|e| (e.standard_field.as_str(), "field_mapping"))
        .chain(kb.run_features_schema.features.iter().map(|f| (f.name.as_str(), "run_features_schema")))
        .chain(kb.code_features.iter().map(|f| (f.name.as_str(), "code_features")))
        .chain(kb.derived_fields.iter().map(|f| (f.name.as_str(), "derived_fields")));
    for (name, section) in sources {
        if let Some(prev) = namespace.get(name) {
            if *prev != section {
                report.error(
                    DuplicateIdentifier,
                    section,
                    format!("identifier {name:?} is also declared in {prev}"),
                );
            }
        } else {
            namespace.insert(name, section);
        }
    }

    for (i, e) in kb.field_mapping.entries.iter().enumerate() {
        if !e.scale.is_finite() || e.scale == 0.0 {
            report.error(
                InvalidScale,
                format!("field_mapping[{i}].scale"),
                format!("scale for {:?} must be finite and nonzero", e.raw_metric_name),
            );
        }
    }

    // Code-feature definitions.
    for (i, f) in kb.code_features.iter().enumerate() {
        let loc = format!("code_features[{i}]");
        if !f.value_domain.contains(&f.default_value) {
            report.error(
                DomainViolation,
                format!("{loc}.default_value"),
                format!("default {} of {:?} is outside its domain", f.default_value, f.name),
            );
        }
        match (f.mode, &f.pattern, &f.prompt_spec) {
            (ExtractionMode::Rule, Some(pattern), None) => {
                if pattern.matcher_count() != 1 {
                    report.error(
                        InvalidPattern,
                        format!("{loc}.pattern"),
                        "pattern needs exactly one of any_token, regex, all, count, labels",
                    );
                }
                for src in pattern.regex_sources() {
                    if let Err(e) = regex::Regex::new(src) {
                        report.error(InvalidPattern, format!("{loc}.pattern"), e.to_string());
                    }
                }
                let domain_ok = match f.value_domain {
                    FeatureDomain::Boolean => {
                        pattern.any_token.is_some() || pattern.regex.is_some() || pattern.all.is_some()
                    }
                    FeatureDomain::Count => pattern.count.is_some(),
                    FeatureDomain::Labels { .. } => pattern.labels.is_some(),
                };
                if !domain_ok && pattern.matcher_count() == 1 {
                    report.error(
                        InvalidPattern,
                        format!("{loc}.pattern"),
                        format!("matcher kind does not produce values of {:?}'s domain", f.name),
                    );
                }
                if let (Some(rules), FeatureDomain::Labels { labels }) = (&pattern.labels, &f.value_domain) {
                    for rule in rules {
                        if !labels.contains(&rule.label) {
                            report.error(
                                DomainViolation,
                                format!("{loc}.pattern.labels"),
                                format!("label {:?} is not in the domain", rule.label),
                            );
                        }
                    }
                }
            }
            (ExtractionMode::Assisted, None, Some(_)) => {}
            _ => report.error(
                ModeMismatch,
                loc,
                format!(
                    "{:?} must carry exactly the {} for its mode",
                    f.name,
                    match f.mode {
                        ExtractionMode::Rule => "pattern",
                        ExtractionMode::Assisted => "prompt_spec",
                    }
                ),
            ),
        }
    }

    // Type environment for expression checks.
    let mut env: BTreeMap<String, Ty> = BTreeMap::new();
    for e in &kb.field_mapping.entries {
        env.insert(e.standard_field.clone(), Ty::Number);
    }
    for f in &kb.run_features_schema.features {
        let ty = match f.value_domain {
            RunValueDomain::Count | RunValueDomain::DurationMs => Ty::Number,
            RunValueDomain::Boolean => Ty::Bool,
            RunValueDomain::Label => Ty::Label,
        };
        env.insert(f.name.clone(), ty);
    }
    for f in &kb.code_features {
        let ty = match f.value_domain {
            FeatureDomain::Boolean => Ty::Bool,
            FeatureDomain::Count => Ty::Number,
            FeatureDomain::Labels { .. } => Ty::Label,
        };
        env.insert(f.name.clone(), ty);
    }

    let known = kb.evidence_identifiers();
    let check_refs = |report: &mut ValidationReport, loc: &str, expr: &Expr| {
        for id in expr.identifiers() {
            if !known.contains(id.as_str()) {
                report.error(DanglingReference, loc, format!("unknown identifier {id:?}"));
            }
        }
    };

    // Derived fields: references, cycles, types.
    for (i, d) in kb.derived_fields.iter().enumerate() {
        check_refs(&mut report, &format!("derived_fields[{i}].expression"), &d.expression);
    }
    match resolve_evaluation_order(kb) {
        Ok(order) => {
            for name in order {
                let def = kb.derived(&name).expect("ordered names are declared");
                let mut problems = Vec::new();
                let ty = infer(&def.expression, &env, &mut problems);
                for p in problems {
                    report.error(TypeMismatch, format!("derived_fields.{name}"), p);
                }
                env.insert(name, ty);
            }
        }
        Err(err) => {
            let cycle = err.0;
            let head = cycle.first().cloned().unwrap_or_default();
            report.error(
                CyclicDependency,
                format!("derived_fields.{head}"),
                format!("cycle {}", cycle.join(" -> ")),
            );
        }
    }

    // Headroom tiers.
    for (i, t) in kb.headroom_tiers.iter().enumerate() {
        let loc = format!("headroom_tiers[{i}]");
        let is_indicator = kb.field_mapping.entries.iter().any(|e| e.standard_field == t.indicator)
            || kb.derived(&t.indicator).is_some();
        if !is_indicator {
            report.error(
                DanglingReference,
                format!("{loc}.indicator"),
                format!("{:?} is neither a standardized nor a derived field", t.indicator),
            );
        } else if matches!(env.get(&t.indicator), Some(Ty::Bool | Ty::Label)) {
            report.error(TypeMismatch, format!("{loc}.indicator"), "tiered indicators must be numeric");
        }
        if t.tier_labels.len() != t.thresholds.len() + 1 {
            report.error(
                InvalidThresholds,
                format!("{loc}.tier_labels"),
                format!(
                    "{} labels for {} thresholds; need thresholds + 1",
                    t.tier_labels.len(),
                    t.thresholds.len()
                ),
            );
        }
        let monotone = t.thresholds.iter().all(|x| x.is_finite())
            && t.thresholds.windows(2).all(|w| w[0] < w[1]);
        if !monotone {
            report.error(
                InvalidThresholds,
                format!("{loc}.thresholds"),
                "thresholds must be finite and strictly increasing",
            );
        }
        duplicates(&mut report, &format!("{loc}.tier_labels"), "tier label", t.tier_labels.iter().map(String::as_str));
    }

    // Predicates.
    for (i, p) in kb.predicates.iter().enumerate() {
        let loc = format!("ncu_predicates[{i}].expression");
        check_refs(&mut report, &loc, &p.expression);
        let mut problems = Vec::new();
        let ty = infer(&p.expression, &env, &mut problems);
        if ty != Ty::Bool && ty != Ty::Unknown {
            problems.push(format!("predicate {:?} is {} rather than boolean", p.name, ty.name()));
        }
        for prob in problems {
            report.error(TypeMismatch, loc.clone(), prob);
        }
    }

    let predicate_names: BTreeSet<&str> = kb.predicates.iter().map(|p| p.name.as_str()).collect();
    let method_ids: BTreeSet<&str> = kb.methods.iter().map(|m| m.method_id.as_str()).collect();
    let types: BTreeSet<&str> = kb.bottleneck_types.iter().map(String::as_str).collect();
    let pred_ref = |report: &mut ValidationReport, loc: String, name: &str| {
        if !predicate_names.contains(name) {
            report.error(DanglingReference, loc, format!("unknown predicate {name:?}"));
        }
    };
    let method_ref = |report: &mut ValidationReport, loc: String, id: &str| {
        if !method_ids.contains(id) {
            report.error(DanglingReference, loc, format!("method {id:?} has no llm_assist entry"));
        }
    };

    // Priority rules.
    let mut ordered = BTreeSet::new();
    for (i, t) in kb.priority.ordering.iter().enumerate() {
        let loc = format!("bottleneck_priority_rules.ordering[{i}]");
        if !types.contains(t.as_str()) {
            report.error(DanglingReference, loc, format!("undeclared bottleneck type {t:?}"));
        } else if !ordered.insert(t.as_str()) {
            report.error(DuplicateIdentifier, loc, format!("{t:?} is ordered twice"));
        }
    }
    for t in &types {
        if !ordered.contains(t) {
            report.error(
                IncompleteOrdering,
                "bottleneck_priority_rules.ordering",
                format!("bottleneck type {t:?} has no priority position"),
            );
        }
    }
    for (i, o) in kb.priority.overrides.iter().enumerate() {
        let loc = format!("bottleneck_priority_rules.overrides[{i}]");
        pred_ref(&mut report, format!("{loc}.condition"), &o.condition);
        if !types.contains(o.promote.as_str()) {
            report.error(
                DanglingReference,
                format!("{loc}.promote"),
                format!("undeclared bottleneck type {:?}", o.promote),
            );
        }
    }

    // Veto rules.
    for (i, v) in kb.vetoes.iter().enumerate() {
        let loc = format!("global_forbidden_rules[{i}]");
        match &v.condition {
            VetoCondition::Predicate(name) => pred_ref(&mut report, format!("{loc}.condition"), name),
            VetoCondition::Expression(expr) => {
                check_refs(&mut report, &format!("{loc}.condition"), expr);
                let mut problems = Vec::new();
                let ty = infer(expr, &env, &mut problems);
                if ty != Ty::Bool && ty != Ty::Unknown {
                    problems.push(format!("condition is {} rather than boolean", ty.name()));
                }
                for p in problems {
                    report.error(TypeMismatch, format!("{loc}.condition"), p);
                }
            }
        }
        for (j, m) in v.forbidden_methods.iter().enumerate() {
            method_ref(&mut report, format!("{loc}.forbidden_methods[{j}]"), m);
        }
    }

    // Decision table.
    let mut ranks: BTreeMap<(&str, i64), &str> = BTreeMap::new();
    for (i, c) in kb.decision_table.iter().enumerate() {
        let loc = format!("decision_table[{i}]");
        if !types.contains(c.bottleneck_type.as_str()) {
            report.error(
                DanglingReference,
                format!("{loc}.bottleneck_type"),
                format!("undeclared bottleneck type {:?}", c.bottleneck_type),
            );
        }
        for (j, p) in c.ncu_signature.iter().enumerate() {
            pred_ref(&mut report, format!("{loc}.ncu_signature[{j}]"), p);
        }
        for (j, p) in c.gate_when.iter().enumerate() {
            pred_ref(&mut report, format!("{loc}.gate_when[{j}]"), p);
        }
        for (indicator, labels) in &c.headroom_condition {
            let hloc = format!("{loc}.headroom_condition.{indicator}");
            match kb.tier_def(indicator) {
                None => report.error(
                    DanglingReference,
                    hloc,
                    format!("{indicator:?} has no headroom tier definition"),
                ),
                Some(def) => {
                    for l in labels {
                        if !def.tier_labels.contains(l) {
                            report.error(DanglingReference, hloc.clone(), format!("unknown tier label {l:?}"));
                        }
                    }
                }
            }
        }
        if c.allowed_methods.is_empty() {
            report.error(EmptyMethodList, format!("{loc}.allowed_methods"), "allowed_methods is empty");
        }
        for (j, m) in c.allowed_methods.iter().enumerate() {
            method_ref(&mut report, format!("{loc}.allowed_methods[{j}]"), m);
        }
        if let Some(prev) = ranks.insert((c.bottleneck_type.as_str(), c.rank), c.case_id.as_str()) {
            report.error(
                DuplicateRank,
                format!("{loc}.rank"),
                format!(
                    "cases {prev:?} and {:?} share rank {} for {:?}",
                    c.case_id, c.rank, c.bottleneck_type
                ),
            );
        }
    }
    for t in &kb.bottleneck_types {
        if kb.cases_for(t).next().is_none() {
            report.error(
                UncoveredBottleneck,
                "decision_table",
                format!("bottleneck type {t:?} has no decision case"),
            );
        }
    }

    // Method knowledge.
    let referenced: BTreeSet<&str> = kb
        .decision_table
        .iter()
        .flat_map(|c| c.allowed_methods.iter())
        .chain(kb.vetoes.iter().flat_map(|v| v.forbidden_methods.iter()))
        .map(String::as_str)
        .collect();
    for (i, m) in kb.methods.iter().enumerate() {
        if m.method_id == FALLBACK_MARKER {
            report.error(
                ReservedIdentifier,
                format!("llm_assist[{i}].method_id"),
                format!("{FALLBACK_MARKER:?} is reserved for fallback plans"),
            );
        }
        if !referenced.contains(m.method_id.as_str()) {
            report.warn(
                OrphanMethod,
                format!("llm_assist[{i}]"),
                format!("method {:?} is never referenced", m.method_id),
            );
        }
    }

    report
}

#[cfg(test)]
mod tests {
    use std::path::Path;

    use super::*;
    use crate::kb::load_knowledge_base;

    fn default_kb() -> KnowledgeBase {
        load_knowledge_base(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../kb")).unwrap()
    }

    fn derived(pairs: &[(&str, &str)]) -> Vec<DerivedFieldDef> {
        pairs
            .iter()
            .map(|(n, e)| DerivedFieldDef {
                name: n.to_string(),
                expression: Expr::parse(e).unwrap(),
            })
            .collect()
    }

    #[test]
    fn default_kb_is_clean() {
        let report = validate_knowledge_base(&default_kb());
        assert!(report.is_clean(), "{:#?}", report.violations);
    }

    #[test]
    fn self_referencing_derived_field_is_a_cycle() {
        let mut kb = default_kb();
        kb.derived_fields.push(derived(&[("a", "a + 1")]).remove(0));
        let err = resolve_evaluation_order(&kb).unwrap_err();
        assert_eq!(err.0, vec!["a".to_string(), "a".to_string()]);
        assert!(validate_knowledge_base(&kb).codes().contains(&ViolationCode::CyclicDependency));
    }

    #[test]
    fn two_cycle_is_reported() {
        let mut kb = default_kb();
        kb.derived_fields = derived(&[("x", "y"), ("y", "x")]);
        let err = resolve_evaluation_order(&kb).unwrap_err();
        assert_eq!(err.0, vec!["x", "y", "x"]);
    }

    #[test]
    fn evaluation_order_follows_dependencies() {
        let mut kb = default_kb();
        kb.derived_fields = derived(&[("c", "b + 1"), ("b", "dram_bytes * 2")]);
        assert_eq!(resolve_evaluation_order(&kb).unwrap(), vec!["b", "c"]);
        kb.derived_fields.clear();
        assert!(resolve_evaluation_order(&kb).unwrap().is_empty());
    }

    #[test]
    fn missing_predicate_in_case_is_dangling() {
        let mut kb = default_kb();
        kb.decision_table[0].gate_when.push("p_missing".into());
        let report = validate_knowledge_base(&kb);
        let errors: Vec<_> = report.errors().collect();
        assert_eq!(errors.len(), 1, "{errors:#?}");
        assert_eq!(errors[0].code, ViolationCode::DanglingReference);
        assert_eq!(errors[0].location, "decision_table[0].gate_when[1]");
    }

    #[test]
    fn unreferenced_method_is_only_a_warning() {
        let mut kb = default_kb();
        let mut extra = kb.methods[0].clone();
        extra.method_id = "unused_idea".into();
        kb.methods.push(extra);
        let report = validate_knowledge_base(&kb);
        assert!(!report.has_errors());
        assert_eq!(report.codes(), BTreeSet::from([ViolationCode::OrphanMethod]));
    }

    #[test]
    fn type_errors_are_caught_statically() {
        let mut kb = default_kb();
        kb.predicates[0].expression = Expr::parse("dram_throughput_pct + 1").unwrap();
        kb.predicates[1].expression = Expr::parse("precision_mode > 3").unwrap();
        let report = validate_knowledge_base(&kb);
        let n = report.errors().filter(|v| v.code == ViolationCode::TypeMismatch).count();
        assert_eq!(n, 2, "{:#?}", report.violations);
    }

    #[test]
    fn tier_shape_is_checked() {
        let mut kb = default_kb();
        kb.headroom_tiers[0].thresholds = vec![80.0, 40.0];
        kb.headroom_tiers[3].tier_labels.pop();
        let codes: Vec<_> = validate_knowledge_base(&kb).errors().map(|v| v.code).collect();
        assert_eq!(codes, vec![ViolationCode::InvalidThresholds, ViolationCode::InvalidThresholds]);
    }
}
