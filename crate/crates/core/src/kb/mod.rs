//! Long-term memory: the expert knowledge base that drives method retrieval.
//!
//! A knowledge base is ten documents, one per section in [`SECTIONS`]. It is
//! loaded once, validated, and then shared read-only.

mod load;
mod validate;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::expr::Expr;
use crate::value::Value;

pub use load::{load_knowledge_base, LoadError};
pub use validate::{
    resolve_evaluation_order, validate_knowledge_base, CyclicDependency, Severity, ValidationReport,
    Violation, ViolationCode,
};

/// Section names in on-disk order.
pub const SECTIONS: [&str; 10] = [
    "field_mapping",
    "run_features_schema",
    "code_features",
    "derived_fields",
    "headroom_tiers",
    "bottleneck_priority_rules",
    "ncu_predicates",
    "global_forbidden_rules",
    "decision_table",
    "llm_assist",
];

/// Method identifier reserved for plans made without knowledge-base methods.
pub const FALLBACK_MARKER: &str = "fallback";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldMappingEntry {
    pub raw_metric_name: String,
    pub standard_field: String,
    pub unit: String,
    pub scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldMapping {
    pub entries: Vec<FieldMappingEntry>,
}

impl FieldMapping {
    pub fn lookup(&self, raw: &str) -> Option<&FieldMappingEntry> {
        self.entries.iter().find(|e| e.raw_metric_name == raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunValueDomain {
    Count,
    DurationMs,
    Boolean,
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFeatureDef {
    pub name: String,
    pub value_domain: RunValueDomain,
    pub description: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFeatureSchema {
    pub features: Vec<RunFeatureDef>,
}

/// Value domain of a static code feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureDomain {
    Boolean,
    Count,
    Labels { labels: Vec<String> },
}

impl FeatureDomain {
    pub fn contains(&self, value: &Value) -> bool {
        match (self, value) {
            (FeatureDomain::Boolean, Value::Bool(_)) => true,
            (FeatureDomain::Count, Value::Number(n)) => *n >= 0.0 && n.fract() == 0.0,
            (FeatureDomain::Labels { labels }, Value::Label(l)) => labels.contains(l),
            _ => false,
        }
    }

    /// Human-readable allowed range, used in assisted-extraction prompts.
    pub fn describe(&self) -> String {
        match self {
            FeatureDomain::Boolean => "one of: true, false".into(),
            FeatureDomain::Count => "a non-negative integer".into(),
            FeatureDomain::Labels { labels } => format!("one of: {}", labels.join(", ")),
        }
    }

    /// Parses a backend answer into a domain value, if it is in range.
    pub fn parse_answer(&self, text: &str) -> Option<Value> {
        let t = text.trim().trim_matches(|c| c == '"' || c == '\'' || c == '`').trim();
        let value = match self {
            FeatureDomain::Boolean => match t.to_ascii_lowercase().as_str() {
                "true" | "yes" => Value::Bool(true),
                "false" | "no" => Value::Bool(false),
                _ => return None,
            },
            FeatureDomain::Count => Value::Number(t.parse::<u64>().ok()? as f64),
            FeatureDomain::Labels { .. } => Value::Label(t.to_string()),
        };
        self.contains(&value).then_some(value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    Rule,
    Assisted,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchScope {
    /// The whole translation unit after comment and string stripping.
    #[default]
    Source,
    /// Only the bodies of `__global__` functions.
    KernelBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRule {
    pub label: String,
    pub regex: String,
}

/// Rule-mode pattern. Exactly one matcher field is set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    /// True when any of these identifier tokens occurs as a whole word.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub any_token: Option<Vec<String>>,
    /// True when the regex matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    /// True when every regex matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all: Option<Vec<String>>,
    /// Number of non-overlapping regex matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<String>,
    /// First label whose regex matches; the feature default otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<LabelRule>>,
    #[serde(default, skip_serializing_if = "is_default_scope")]
    pub within: MatchScope,
}

fn is_default_scope(s: &MatchScope) -> bool {
    *s == MatchScope::Source
}

impl PatternSpec {
    pub fn matcher_count(&self) -> usize {
        usize::from(self.any_token.is_some())
            + usize::from(self.regex.is_some())
            + usize::from(self.all.is_some())
            + usize::from(self.count.is_some())
            + usize::from(self.labels.is_some())
    }

    /// Every regex source the pattern carries, in declaration order.
    pub fn regex_sources(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        out.extend(self.regex.as_deref());
        if let Some(all) = &self.all {
            out.extend(all.iter().map(String::as_str));
        }
        out.extend(self.count.as_deref());
        if let Some(labels) = &self.labels {
            out.extend(labels.iter().map(|l| l.regex.as_str()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub definition: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeFeatureDef {
    pub name: String,
    pub value_domain: FeatureDomain,
    pub mode: ExtractionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<PatternSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_spec: Option<PromptSpec>,
    pub default_value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedFieldDef {
    pub name: String,
    pub expression: Expr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryRule {
    /// A value equal to a cut point falls into the tier above it.
    LowerInclusive,
    /// A value equal to a cut point falls into the tier below it.
    UpperInclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadroomTierDef {
    pub indicator: String,
    pub thresholds: Vec<f64>,
    pub tier_labels: Vec<String>,
    pub boundary_rule: BoundaryRule,
}

impl HeadroomTierDef {
    /// Tier label for `value`. Assumes a validated definition.
    pub fn tier_for(&self, value: f64) -> &str {
        let idx = self
            .thresholds
            .iter()
            .take_while(|&&cut| match self.boundary_rule {
                BoundaryRule::LowerInclusive => value >= cut,
                BoundaryRule::UpperInclusive => value > cut,
            })
            .count();
        &self.tier_labels[idx]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredicateDef {
    pub name: String,
    pub expression: Expr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorityOverride {
    pub condition: String,
    pub promote: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorityRule {
    pub ordering: Vec<String>,
    #[serde(default)]
    pub overrides: Vec<PriorityOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum VetoCondition {
    Predicate(String),
    Expression(Expr),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VetoRule {
    pub name: String,
    pub condition: VetoCondition,
    pub forbidden_methods: Vec<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionCase {
    pub case_id: String,
    pub bottleneck_type: String,
    pub ncu_signature: Vec<String>,
    #[serde(default)]
    pub headroom_condition: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub gate_when: Vec<String>,
    pub allowed_methods: Vec<String>,
    pub rank: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodKnowledge {
    pub method_id: String,
    pub rationale: String,
    pub implementation_cues: Vec<String>,
    pub expected_benefit: String,
    pub preconditions_note: String,
}

/// The ten-section long-term memory.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub schema_version: String,
    pub field_mapping: FieldMapping,
    pub run_features_schema: RunFeatureSchema,
    pub code_features: Vec<CodeFeatureDef>,
    pub derived_fields: Vec<DerivedFieldDef>,
    pub headroom_tiers: Vec<HeadroomTierDef>,
    pub bottleneck_types: Vec<String>,
    pub priority: PriorityRule,
    pub predicates: Vec<PredicateDef>,
    pub vetoes: Vec<VetoRule>,
    pub decision_table: Vec<DecisionCase>,
    pub methods: Vec<MethodKnowledge>,
}

impl KnowledgeBase {
    pub fn predicate(&self, name: &str) -> Option<&PredicateDef> {
        self.predicates.iter().find(|p| p.name == name)
    }

    pub fn method(&self, id: &str) -> Option<&MethodKnowledge> {
        self.methods.iter().find(|m| m.method_id == id)
    }

    pub fn derived(&self, name: &str) -> Option<&DerivedFieldDef> {
        self.derived_fields.iter().find(|d| d.name == name)
    }

    pub fn tier_def(&self, indicator: &str) -> Option<&HeadroomTierDef> {
        self.headroom_tiers.iter().find(|t| t.indicator == indicator)
    }

    pub fn code_feature(&self, name: &str) -> Option<&CodeFeatureDef> {
        self.code_features.iter().find(|c| c.name == name)
    }

    pub fn cases_for<'a>(&'a self, bottleneck: &'a str) -> impl Iterator<Item = &'a DecisionCase> + 'a {
        self.decision_table
            .iter()
            .filter(move |c| c.bottleneck_type == bottleneck)
    }

    /// Identifiers an expression may read: standardized, run, code and
    /// derived fields.
    pub fn evidence_identifiers(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        out.extend(self.field_mapping.entries.iter().map(|e| e.standard_field.as_str()));
        out.extend(self.run_features_schema.features.iter().map(|f| f.name.as_str()));
        out.extend(self.code_features.iter().map(|f| f.name.as_str()));
        out.extend(self.derived_fields.iter().map(|f| f.name.as_str()));
        out
    }

    /// Section documents keyed by section name, in the on-disk shape.
    pub fn to_documents(&self) -> BTreeMap<&'static str, serde_json::Value> {
        load::to_documents(self)
    }

    /// Writes the ten section documents into `dir` (created if needed).
    pub fn write_dir(&self, dir: &std::path::Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, doc) in self.to_documents() {
            let text = serde_json::to_string_pretty(&doc).map_err(std::io::Error::other)?;
            std::fs::write(dir.join(format!("{name}.json")), text + "\n")?;
        }
        Ok(())
    }

    /// Single-document form with one top-level key per section.
    pub fn to_bundle(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.to_documents()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        )
    }
}
