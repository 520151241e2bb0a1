//! Deterministic method retrieval over the knowledge base.
//!
//! [`recommend`] runs the full pipeline: normalize raw metrics, compute
//! derived fields, assign headroom tiers, evaluate predicates, collect
//! bottleneck candidates, order them by priority, match one decision case per
//! candidate and filter its methods through the veto rules. Every step lands
//! in a [`DecisionTrace`] that carries enough evidence to be re-checked
//! without this module.
//!
//! All maps are ordered, so two calls on the same inputs serialize to the same
//! bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::expr::{EvalError, Expr, Scope};
use crate::features::CodeFeatureVector;
use crate::kb::{
    resolve_evaluation_order, CyclicDependency, DecisionCase, KnowledgeBase, MethodKnowledge,
    VetoCondition,
};
use crate::value::Value;

/// Everything the engine consumes for one kernel.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    /// Raw profiler metric name → value, aggregated over launches.
    pub raw_metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub run_features: BTreeMap<String, Value>,
    #[serde(default)]
    pub code_features: CodeFeatureVector,
}

/// Evidence after normalization, derivation and tiering.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StandardizedEvidence {
    pub standardized: BTreeMap<String, f64>,
    pub run_features: BTreeMap<String, Value>,
    pub code_features: BTreeMap<String, Value>,
    pub derived: BTreeMap<String, Value>,
    pub tiers: BTreeMap<String, String>,
    pub unknown_metrics: Vec<String>,
    /// Identifiers the knowledge base reads that have no value.
    pub missing_fields: BTreeSet<String>,
}

impl StandardizedEvidence {
    /// Standardized, run, code and derived values before derivation runs.
    pub fn from_bundle(bundle: &EvidenceBundle, kb: &KnowledgeBase) -> Self {
        let (standardized, unknown_metrics) = normalize_metrics(&bundle.raw_metrics, kb);
        StandardizedEvidence {
            standardized,
            run_features: bundle.run_features.clone(),
            code_features: bundle.code_features.values.clone(),
            unknown_metrics,
            ..Default::default()
        }
    }

    /// Every identifier with a value, flattened into one map.
    pub fn values(&self) -> BTreeMap<String, Value> {
        let mut out: BTreeMap<String, Value> = self
            .standardized
            .iter()
            .map(|(k, v)| (k.clone(), Value::Number(*v)))
            .collect();
        out.extend(self.run_features.clone());
        out.extend(self.code_features.clone());
        out.extend(self.derived.clone());
        out
    }

    fn number(&self, name: &str) -> Option<f64> {
        self.standardized
            .get(name)
            .copied()
            .or_else(|| self.derived.get(name).and_then(Value::as_number))
    }
}

impl Scope for StandardizedEvidence {
    fn lookup(&self, name: &str) -> Option<Value> {
        if let Some(v) = self.standardized.get(name) {
            return Some(Value::Number(*v));
        }
        self.derived
            .get(name)
            .or_else(|| self.run_features.get(name))
            .or_else(|| self.code_features.get(name))
            .cloned()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvaluationFault {
    #[error(transparent)]
    Cycle(#[from] CyclicDependency),
    #[error("derived field {field:?}: {source}")]
    Expression {
        field: String,
        #[source]
        source: EvalError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedMetric {
    pub raw_metric_name: String,
    pub standard_field: String,
    pub raw_value: f64,
    pub scale: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStep {
    pub matched: Vec<NormalizedMetric>,
    /// Raw names with no mapping entry.
    pub unmapped: Vec<String>,
    /// Mapped metrics whose value was not finite; they count as missing.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedRecord {
    pub name: String,
    pub expression: String,
    /// `None` when an input was missing.
    pub value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierRecord {
    pub indicator: String,
    pub value: Option<f64>,
    pub tier: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateRecord {
    pub name: String,
    pub expression: String,
    pub holds: bool,
    /// Identifiers the expression reads that had no value.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing_inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateCheck {
    pub predicate: String,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureCheck {
    pub case_id: String,
    pub predicates: Vec<PredicateCheck>,
    pub holds: bool,
}

/// Signature checks for every case of one bottleneck type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckCheck {
    pub bottleneck_type: String,
    pub signatures: Vec<SignatureCheck>,
    pub candidate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverrideRecord {
    pub condition: String,
    pub promote: String,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorityResolution {
    pub ordering: Vec<String>,
    pub overrides: Vec<OverrideRecord>,
    pub resolved_order: Vec<String>,
    /// Candidate types in resolved order.
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckIdentification {
    pub checks: Vec<BottleneckCheck>,
    pub priority: PriorityResolution,
}

impl BottleneckIdentification {
    pub fn candidates(&self) -> &[String] {
        &self.priority.candidates
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadroomCheck {
    pub indicator: String,
    pub tier: Option<String>,
    pub accepted: Vec<String>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub case_id: String,
    pub rank: i64,
    pub signature: Vec<PredicateCheck>,
    pub headroom: Vec<HeadroomCheck>,
    pub gates: Vec<PredicateCheck>,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VetoRecord {
    pub rule: String,
    pub condition: String,
    pub holds: bool,
    /// Methods this rule removed from the list it was applied to.
    pub removed: Vec<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateAttempt {
    pub bottleneck_type: String,
    pub cases: Vec<CaseEvaluation>,
    pub matched_case: Option<String>,
    pub methods_before_veto: Vec<String>,
    pub vetoes: Vec<VetoRecord>,
    pub surviving: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOutcome {
    pub bottleneck_type: Option<String>,
    pub matched_case: Option<String>,
    pub methods: Vec<String>,
    pub fallback: bool,
}

/// Step-by-step audit record of one recommendation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub inputs: EvidenceBundle,
    pub normalization: NormalizationStep,
    pub derived: Vec<DerivedRecord>,
    /// Every identifier value visible to predicates, gates and vetoes.
    pub evidence: BTreeMap<String, Value>,
    pub missing_fields: BTreeSet<String>,
    pub tiers: Vec<TierRecord>,
    pub predicates: Vec<PredicateRecord>,
    pub bottlenecks: Vec<BottleneckCheck>,
    pub priority: PriorityResolution,
    pub attempts: Vec<CandidateAttempt>,
    pub outcome: TraceOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendedMethod {
    pub method_id: String,
    pub knowledge: MethodKnowledge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecommendation {
    pub methods: Vec<RecommendedMethod>,
    pub bottleneck_type: Option<String>,
    pub matched_case: Option<String>,
    pub fallback: bool,
}

impl MethodRecommendation {
    pub fn fallback() -> Self {
        MethodRecommendation {
            methods: Vec::new(),
            bottleneck_type: None,
            matched_case: None,
            fallback: true,
        }
    }

    pub fn method_ids(&self) -> Vec<&str> {
        self.methods.iter().map(|m| m.method_id.as_str()).collect()
    }
}

fn normalization_step(raw: &BTreeMap<String, f64>, kb: &KnowledgeBase) -> NormalizationStep {
    let mut step = NormalizationStep::default();
    for (name, &raw_value) in raw {
        match kb.field_mapping.lookup(name) {
            Some(entry) if raw_value.is_finite() => step.matched.push(NormalizedMetric {
                raw_metric_name: name.clone(),
                standard_field: entry.standard_field.clone(),
                raw_value,
                scale: entry.scale,
                value: raw_value * entry.scale,
            }),
            Some(_) => step.rejected.push(name.clone()),
            None => step.unmapped.push(name.clone()),
        }
    }
    step
}

/// Maps raw metric names onto standardized fields, applying each scale.
/// Names without a mapping entry are returned, never dropped.
pub fn normalize_metrics(
    raw: &BTreeMap<String, f64>,
    kb: &KnowledgeBase,
) -> (BTreeMap<String, f64>, Vec<String>) {
    let step = normalization_step(raw, kb);
    let standardized = step
        .matched
        .into_iter()
        .map(|m| (m.standard_field, m.value))
        .collect();
    (standardized, step.unmapped)
}

fn derive(evidence: &mut StandardizedEvidence, kb: &KnowledgeBase, order: &[String]) -> Vec<DerivedRecord> {
    let mut records = Vec::with_capacity(order.len());
    for name in order {
        let def = kb.derived(name).expect("ordered names are declared");
        let (value, fault) = match def.expression.eval(&*evidence) {
            Ok(eval) => (eval.value().cloned(), None),
            Err(e) => (None, Some(e.to_string())),
        };
        match &value {
            Some(v) => {
                evidence.derived.insert(name.clone(), v.clone());
            }
            None => {
                evidence.derived.remove(name);
            }
        }
        records.push(DerivedRecord {
            name: name.clone(),
            expression: def.expression.to_string(),
            value,
            fault,
        });
    }
    evidence.missing_fields = missing_fields(evidence, kb);
    records
}

/// Identifiers read anywhere in the knowledge base that have no value.
fn missing_fields(evidence: &StandardizedEvidence, kb: &KnowledgeBase) -> BTreeSet<String> {
    let mut referenced: BTreeSet<String> = BTreeSet::new();
    for d in &kb.derived_fields {
        referenced.insert(d.name.clone());
        referenced.extend(d.expression.identifiers());
    }
    for p in &kb.predicates {
        referenced.extend(p.expression.identifiers());
    }
    for v in &kb.vetoes {
        if let VetoCondition::Expression(e) = &v.condition {
            referenced.extend(e.identifiers());
        }
    }
    referenced.extend(kb.headroom_tiers.iter().map(|t| t.indicator.clone()));
    referenced
        .into_iter()
        .filter(|id| evidence.lookup(id).is_none())
        .collect()
}

/// Computes derived fields in dependency order. A field whose inputs are
/// missing is itself missing.
pub fn compute_derived_fields(
    mut evidence: StandardizedEvidence,
    kb: &KnowledgeBase,
) -> Result<StandardizedEvidence, EvaluationFault> {
    let order = resolve_evaluation_order(kb)?;
    let records = derive(&mut evidence, kb, &order);
    if let Some(r) = records.iter().find(|r| r.fault.is_some()) {
        let def = kb.derived(&r.name).expect("declared");
        let source = def.expression.eval(&evidence).expect_err("fault recorded");
        return Err(EvaluationFault::Expression {
            field: r.name.clone(),
            source,
        });
    }
    Ok(evidence)
}

/// Tier per tiered indicator; an indicator without a value gets none.
pub fn assign_headroom_tiers(evidence: &StandardizedEvidence, kb: &KnowledgeBase) -> Vec<TierRecord> {
    kb.headroom_tiers
        .iter()
        .map(|def| {
            let value = evidence.number(&def.indicator);
            TierRecord {
                indicator: def.indicator.clone(),
                value,
                tier: value.map(|v| def.tier_for(v).to_string()),
            }
        })
        .collect()
}

fn predicate_record(name: &str, expr: &Expr, evidence: &StandardizedEvidence) -> PredicateRecord {
    let (holds, fault) = match expr.holds(evidence) {
        Ok(b) => (b, None),
        Err(e) => (false, Some(e.to_string())),
    };
    PredicateRecord {
        name: name.to_string(),
        expression: expr.to_string(),
        holds,
        missing_inputs: expr
            .identifiers()
            .into_iter()
            .filter(|id| evidence.lookup(id).is_none())
            .collect(),
        fault,
    }
}

/// Truth value of every declared predicate, in declaration order.
pub fn evaluate_predicates(evidence: &StandardizedEvidence, kb: &KnowledgeBase) -> Vec<PredicateRecord> {
    kb.predicates
        .iter()
        .map(|p| predicate_record(&p.name, &p.expression, evidence))
        .collect()
}

fn predicate_holds(kb: &KnowledgeBase, evidence: &StandardizedEvidence, name: &str) -> bool {
    kb.predicate(name)
        .map(|p| p.expression.holds(evidence).unwrap_or(false))
        .unwrap_or(false)
}

fn checks(kb: &KnowledgeBase, evidence: &StandardizedEvidence, names: &[String]) -> Vec<PredicateCheck> {
    names
        .iter()
        .map(|n| PredicateCheck {
            predicate: n.clone(),
            holds: predicate_holds(kb, evidence, n),
        })
        .collect()
}

/// Bottleneck types with at least one fully satisfied case signature,
/// ordered by the priority rule.
pub fn identify_bottlenecks(evidence: &StandardizedEvidence, kb: &KnowledgeBase) -> BottleneckIdentification {
    let checks: Vec<BottleneckCheck> = kb
        .bottleneck_types
        .iter()
        .map(|t| {
            let signatures: Vec<SignatureCheck> = kb
                .cases_for(t)
                .map(|c| {
                    let predicates = checks(kb, evidence, &c.ncu_signature);
                    let holds = predicates.iter().all(|p| p.holds);
                    SignatureCheck {
                        case_id: c.case_id.clone(),
                        predicates,
                        holds,
                    }
                })
                .collect();
            BottleneckCheck {
                bottleneck_type: t.clone(),
                candidate: signatures.iter().any(|s| s.holds),
                signatures,
            }
        })
        .collect();

    let overrides: Vec<OverrideRecord> = kb
        .priority
        .overrides
        .iter()
        .map(|o| OverrideRecord {
            condition: o.condition.clone(),
            promote: o.promote.clone(),
            holds: predicate_holds(kb, evidence, &o.condition),
        })
        .collect();
    let mut resolved_order: Vec<String> = Vec::new();
    for o in overrides.iter().filter(|o| o.holds) {
        if !resolved_order.contains(&o.promote) {
            resolved_order.push(o.promote.clone());
        }
    }
    for t in &kb.priority.ordering {
        if !resolved_order.contains(t) {
            resolved_order.push(t.clone());
        }
    }
    let candidate_set: BTreeSet<&str> = checks
        .iter()
        .filter(|c| c.candidate)
        .map(|c| c.bottleneck_type.as_str())
        .collect();
    let candidates = resolved_order
        .iter()
        .filter(|t| candidate_set.contains(t.as_str()))
        .cloned()
        .collect();
    BottleneckIdentification {
        checks,
        priority: PriorityResolution {
            ordering: kb.priority.ordering.clone(),
            overrides,
            resolved_order,
            candidates,
        },
    }
}

fn evaluate_case(case: &DecisionCase, evidence: &StandardizedEvidence, kb: &KnowledgeBase) -> CaseEvaluation {
    let signature = checks(kb, evidence, &case.ncu_signature);
    let headroom: Vec<HeadroomCheck> = case
        .headroom_condition
        .iter()
        .map(|(indicator, accepted)| {
            let tier = evidence.tiers.get(indicator).cloned();
            let holds = tier.as_ref().is_some_and(|t| accepted.contains(t));
            HeadroomCheck {
                indicator: indicator.clone(),
                tier,
                accepted: accepted.clone(),
                holds,
            }
        })
        .collect();
    let gates = checks(kb, evidence, &case.gate_when);
    let matched = signature.iter().all(|p| p.holds)
        && headroom.iter().all(|h| h.holds)
        && gates.iter().all(|g| g.holds);
    CaseEvaluation {
        case_id: case.case_id.clone(),
        rank: case.rank,
        signature,
        headroom,
        gates,
        matched,
    }
}

/// Lowest-rank case of `bottleneck` whose signature, headroom condition and
/// gates all hold, together with the evaluation of every case tried.
pub fn match_case<'kb>(
    bottleneck: &'kb str,
    evidence: &StandardizedEvidence,
    kb: &'kb KnowledgeBase,
) -> (Option<&'kb DecisionCase>, Vec<CaseEvaluation>) {
    let mut cases: Vec<&DecisionCase> = kb.cases_for(bottleneck).collect();
    cases.sort_by_key(|c| c.rank);
    let mut evaluations = Vec::with_capacity(cases.len());
    for case in cases {
        let eval = evaluate_case(case, evidence, kb);
        let matched = eval.matched;
        evaluations.push(eval);
        if matched {
            return (Some(case), evaluations);
        }
    }
    (None, evaluations)
}

/// Removes every method forbidden by a rule whose condition holds.
pub fn apply_veto_rules(
    methods: &[String],
    evidence: &StandardizedEvidence,
    kb: &KnowledgeBase,
) -> (Vec<String>, Vec<VetoRecord>) {
    let mut remaining: Vec<String> = methods.to_vec();
    let mut records = Vec::with_capacity(kb.vetoes.len());
    for rule in &kb.vetoes {
        let (holds, condition) = match &rule.condition {
            VetoCondition::Predicate(name) => (predicate_holds(kb, evidence, name), name.clone()),
            VetoCondition::Expression(e) => (e.holds(evidence).unwrap_or(false), e.to_string()),
        };
        let mut removed = Vec::new();
        if holds {
            remaining.retain(|m| {
                let forbidden = rule.forbidden_methods.contains(m);
                if forbidden {
                    removed.push(m.clone());
                }
                !forbidden
            });
        }
        records.push(VetoRecord {
            rule: rule.name.clone(),
            condition,
            holds,
            removed,
            reason: rule.reason.clone(),
        });
    }
    (remaining, records)
}

/// Runs the full retrieval pipeline. Candidates are tried in priority order
/// until one yields a case whose methods survive the vetoes; otherwise the
/// recommendation is a fallback with no methods.
pub fn recommend(bundle: &EvidenceBundle, kb: &KnowledgeBase) -> (MethodRecommendation, DecisionTrace) {
    let normalization = normalization_step(&bundle.raw_metrics, kb);
    let mut evidence = StandardizedEvidence {
        standardized: normalization
            .matched
            .iter()
            .map(|m| (m.standard_field.clone(), m.value))
            .collect(),
        run_features: bundle.run_features.clone(),
        code_features: bundle.code_features.values.clone(),
        unknown_metrics: normalization.unmapped.clone(),
        ..Default::default()
    };
    // A validated knowledge base always has an order; an invalid one derives
    // nothing rather than guessing.
    let order = resolve_evaluation_order(kb).unwrap_or_default();
    let derived = derive(&mut evidence, kb, &order);
    let tiers = assign_headroom_tiers(&evidence, kb);
    evidence.tiers = tiers
        .iter()
        .filter_map(|t| Some((t.indicator.clone(), t.tier.clone()?)))
        .collect();
    let predicates = evaluate_predicates(&evidence, kb);
    let identification = identify_bottlenecks(&evidence, kb);

    let mut attempts = Vec::new();
    let mut chosen: Option<(String, String, Vec<String>)> = None;
    for bottleneck in identification.candidates() {
        let (case, cases) = match_case(bottleneck, &evidence, kb);
        let mut attempt = CandidateAttempt {
            bottleneck_type: bottleneck.clone(),
            cases,
            matched_case: case.map(|c| c.case_id.clone()),
            methods_before_veto: Vec::new(),
            vetoes: Vec::new(),
            surviving: Vec::new(),
        };
        if let Some(case) = case {
            let (surviving, vetoes) = apply_veto_rules(&case.allowed_methods, &evidence, kb);
            attempt.methods_before_veto = case.allowed_methods.clone();
            attempt.vetoes = vetoes;
            attempt.surviving = surviving.clone();
            if !surviving.is_empty() {
                chosen = Some((bottleneck.clone(), case.case_id.clone(), surviving));
            }
        }
        attempts.push(attempt);
        if chosen.is_some() {
            break;
        }
    }

    let recommendation = match &chosen {
        Some((bottleneck, case_id, methods)) => MethodRecommendation {
            methods: methods
                .iter()
                .filter_map(|id| {
                    kb.method(id).map(|k| RecommendedMethod {
                        method_id: id.clone(),
                        knowledge: k.clone(),
                    })
                })
                .collect(),
            bottleneck_type: Some(bottleneck.clone()),
            matched_case: Some(case_id.clone()),
            fallback: false,
        },
        None => MethodRecommendation::fallback(),
    };
    let trace = DecisionTrace {
        inputs: bundle.clone(),
        normalization,
        derived,
        evidence: evidence.values(),
        missing_fields: evidence.missing_fields.clone(),
        tiers,
        predicates,
        bottlenecks: identification.checks,
        priority: identification.priority,
        attempts,
        outcome: TraceOutcome {
            bottleneck_type: recommendation.bottleneck_type.clone(),
            matched_case: recommendation.matched_case.clone(),
            methods: recommendation.method_ids().into_iter().map(String::from).collect(),
            fallback: recommendation.fallback,
        },
    };
    (recommendation, trace)
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Human-readable rendering used by `kerntune explain`.
impl fmt::Display for DecisionTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "1. normalization")?;
        for m in &self.normalization.matched {
            writeln!(
                f,
                "   {} = {} -> {} = {}",
                m.raw_metric_name, m.raw_value, m.standard_field, m.value
            )?;
        }
        for u in &self.normalization.unmapped {
            writeln!(f, "   unmapped: {u}")?;
        }
        for r in &self.normalization.rejected {
            writeln!(f, "   rejected (non-finite): {r}")?;
        }
        writeln!(f, "2. derived fields")?;
        for d in &self.derived {
            let v = d.value.as_ref().map_or("missing".to_string(), |v| v.to_string());
            write!(f, "   {} := {} = {v}", d.name, d.expression)?;
            if let Some(fault) = &d.fault {
                write!(f, " ({fault})")?;
            }
            writeln!(f)?;
        }
        writeln!(f, "3. headroom tiers")?;
        for t in &self.tiers {
            match (&t.value, &t.tier) {
                (Some(v), Some(tier)) => writeln!(f, "   {} = {v} -> {tier}", t.indicator)?,
                _ => writeln!(f, "   {} missing, no tier", t.indicator)?,
            }
        }
        writeln!(f, "4. predicates")?;
        for p in &self.predicates {
            write!(f, "   [{}] {} := {}", if p.holds { "x" } else { " " }, p.name, p.expression)?;
            if !p.missing_inputs.is_empty() {
                write!(f, " (missing: {})", p.missing_inputs.join(", "))?;
            }
            writeln!(f)?;
        }
        writeln!(f, "5. bottleneck candidates")?;
        for b in &self.bottlenecks {
            let hits: Vec<&str> = b
                .signatures
                .iter()
                .filter(|s| s.holds)
                .map(|s| s.case_id.as_str())
                .collect();
            writeln!(
                f,
                "   {}: {}{}",
                b.bottleneck_type,
                if b.candidate { "candidate" } else { "not matched" },
                if hits.is_empty() { String::new() } else { format!(" via {}", hits.join(", ")) }
            )?;
        }
        writeln!(f, "6. priority")?;
        for o in &self.priority.overrides {
            writeln!(f, "   override {} -> promote {}: {}", o.condition, o.promote, mark(o.holds))?;
        }
        writeln!(f, "   order: {}", self.priority.candidates.join(" > "))?;
        writeln!(f, "7. case matching and vetoes")?;
        for a in &self.attempts {
            writeln!(f, "   {}", a.bottleneck_type)?;
            for c in &a.cases {
                let gates: Vec<String> = c
                    .gates
                    .iter()
                    .map(|g| format!("{}={}", g.predicate, mark(g.holds)))
                    .collect();
                let headroom: Vec<String> = c
                    .headroom
                    .iter()
                    .map(|h| {
                        format!(
                            "{} {} in [{}]",
                            h.indicator,
                            h.tier.as_deref().unwrap_or("none"),
                            h.accepted.join(",")
                        )
                    })
                    .collect();
                writeln!(
                    f,
                    "     case {} (rank {}): signature={} headroom=[{}] gates=[{}] -> {}",
                    c.case_id,
                    c.rank,
                    mark(c.signature.iter().all(|p| p.holds)),
                    headroom.join("; "),
                    gates.join(", "),
                    if c.matched { "matched" } else { "skipped" }
                )?;
            }
            for v in a.vetoes.iter().filter(|v| v.holds) {
                writeln!(
                    f,
                    "     veto {} ({}): removed [{}] - {}",
                    v.rule,
                    v.condition,
                    v.removed.join(", "),
                    v.reason
                )?;
            }
            if a.matched_case.is_some() {
                writeln!(f, "     surviving: [{}]", a.surviving.join(", "))?;
            }
        }
        writeln!(f, "8. outcome")?;
        if self.outcome.fallback {
            writeln!(f, "   fallback: no case survived")
        } else {
            writeln!(
                f,
                "   case {} ({}): {}",
                self.outcome.matched_case.as_deref().unwrap_or("-"),
                self.outcome.bottleneck_type.as_deref().unwrap_or("-"),
                self.outcome.methods.join(", ")
            )
        }
    }
}
