//! Static code features of a kernel candidate.
//!
//! Rule-mode features are lexical: the CUDA text is pulled out of the
//! candidate program, comments and string literals are blanked, and each
//! feature's pattern runs over either the whole text or only the bodies of
//! `__global__` functions. Positive evidence sets a value; no evidence leaves
//! the declared default. Assisted-mode features ask the reasoning backend to
//! classify the source against the feature's definition and allowed range.

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::agents::{self, AgentFault, Answer, BackendError, ReasoningBackend, Rejection, Role};
use crate::kb::{CodeFeatureDef, ExtractionMode, FeatureDomain, KnowledgeBase, MatchScope, PatternSpec};
use crate::value::Value;

/// Where a feature value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Rule,
    Assisted,
    Default,
}

/// One value per declared code feature.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CodeFeatureVector {
    pub values: BTreeMap<String, Value>,
    pub provenance: BTreeMap<String, Provenance>,
}

impl CodeFeatureVector {
    fn set(&mut self, name: &str, value: Value, provenance: Provenance) {
        self.values.insert(name.to_string(), value);
        self.provenance.insert(name.to_string(), provenance);
    }

    /// Every declared feature at its default.
    pub fn defaults(kb: &KnowledgeBase) -> Self {
        let mut v = CodeFeatureVector::default();
        for def in &kb.code_features {
            v.set(&def.name, def.default_value.clone(), Provenance::Default);
        }
        v
    }

    /// Overwrites entries with those of `other`.
    pub fn merge(&mut self, other: CodeFeatureVector) {
        self.values.extend(other.values);
        self.provenance.extend(other.provenance);
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("feature {feature}: invalid pattern {pattern:?}: {detail}")]
    InvalidPattern {
        feature: String,
        pattern: String,
        detail: String,
    },
    #[error("feature {0}: rule-mode feature has no pattern")]
    MissingPattern(String),
}

fn looks_like_cuda(text: &str) -> bool {
    ["__global__", "__device__", "#include", "torch::Tensor", "<<<"]
        .iter()
        .any(|m| text.contains(m))
}

/// Pulls the CUDA/C++ text out of a candidate program.
///
/// A Python program carries its kernels in triple-quoted strings (the
/// sources handed to an inline extension build); those that look like CUDA
/// are concatenated. Anything without triple-quoted CUDA is taken as CUDA
/// itself.
pub fn extract_cuda_sources(program: &str) -> String {
    let mut pieces = Vec::new();
    let mut rest = program;
    loop {
        let next = ["\"\"\"", "'''"]
            .iter()
            .filter_map(|q| rest.find(q).map(|i| (i, *q)))
            .min_by_key(|(i, _)| *i);
        let Some((start, quote)) = next else { break };
        let body = &rest[start + 3..];
        let Some(end) = body.find(quote) else { break };
        if looks_like_cuda(&body[..end]) {
            pieces.push(&body[..end]);
        }
        rest = &body[end + 3..];
    }
    if pieces.is_empty() {
        program.to_string()
    } else {
        pieces.join("\n")
    }
}

/// Blanks C/C++ comments and the contents of string and character literals,
/// keeping line structure so positions stay meaningful.
pub fn strip_comments_and_strings(src: &str) -> String {
    #[derive(PartialEq)]
    enum S {
        Code,
        Line,
        Block,
        Str(char),
    }
    let mut out = String::with_capacity(src.len());
    let mut state = S::Code;
    let mut chars = src.chars().peekable();
    while let Some(c) = chars.next() {
        match state {
            S::Code => match c {
                '/' if chars.peek() == Some(&'/') => {
                    chars.next();
                    out.push_str("  ");
                    state = S::Line;
                }
                '/' if chars.peek() == Some(&'*') => {
                    chars.next();
                    out.push_str("  ");
                    state = S::Block;
                }
                '"' | '\'' => {
                    out.push(c);
                    state = S::Str(c);
                }
                _ => out.push(c),
            },
            S::Line => {
                if c == '\n' {
                    out.push('\n');
                    state = S::Code;
                } else {
                    out.push(' ');
                }
            }
            S::Block => {
                if c == '*' && chars.peek() == Some(&'/') {
                    chars.next();
                    out.push_str("  ");
                    state = S::Code;
                } else {
                    out.push(if c == '\n' { '\n' } else { ' ' });
                }
            }
            S::Str(q) => {
                if c == '\\' {
                    if chars.next() == Some('\n') {
                        out.push('\n');
                    }
                } else if c == q {
                    out.push(q);
                    state = S::Code;
                } else if c == '\n' {
                    // Unterminated literal: stop blanking at the line end.
                    out.push('\n');
                    state = S::Code;
                }
            }
        }
    }
    out
}

fn matching_brace(text: &str, open: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (i, b) in text.bytes().enumerate().skip(open) {
        match b {
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Bodies of the `__global__` function definitions in stripped text.
pub fn kernel_bodies(stripped: &str) -> Vec<&str> {
    let mut bodies = Vec::new();
    let mut from = 0;
    while let Some(pos) = stripped[from..].find("__global__") {
        let start = from + pos + "__global__".len();
        from = start;
        // The parameter list ends at the `)` that closes the first `(`.
        let Some(paren) = stripped[start..].find('(').map(|p| start + p) else { break };
        let mut depth = 0usize;
        let mut close = None;
        for (i, b) in stripped.bytes().enumerate().skip(paren) {
            match b {
                b'(' => depth += 1,
                b')' => {
                    depth -= 1;
                    if depth == 0 {
                        close = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        let Some(close) = close else { break };
        let tail = &stripped[close..];
        let brace = tail.find('{');
        let semi = tail.find(';');
        match (brace, semi) {
            (Some(b), s) if s.is_none_or(|s| b < s) => {
                let open = close + b;
                if let Some(end) = matching_brace(stripped, open) {
                    bodies.push(&stripped[open + 1..end]);
                    from = end;
                }
            }
            _ => from = close,
        }
    }
    bodies
}

enum Matcher {
    Any(Regex),
    All(Vec<Regex>),
    Count(Regex),
    Labels(Vec<(String, Regex)>),
}

struct CompiledRule {
    name: String,
    default: Value,
    scope: MatchScope,
    matcher: Matcher,
}

fn compile(feature: &str, pattern: &str) -> Result<Regex, FeatureError> {
    Regex::new(pattern).map_err(|e| FeatureError::InvalidPattern {
        feature: feature.to_string(),
        pattern: pattern.to_string(),
        detail: e.to_string(),
    })
}

fn compile_rule(def: &CodeFeatureDef) -> Result<CompiledRule, FeatureError> {
    let spec: &PatternSpec = def
        .pattern
        .as_ref()
        .ok_or_else(|| FeatureError::MissingPattern(def.name.clone()))?;
    let name = &def.name;
    let matcher = if let Some(tokens) = &spec.any_token {
        let alternatives: Vec<String> = tokens.iter().map(|t| regex::escape(t)).collect();
        Matcher::Any(compile(
            name,
            &format!("(?:^|[^A-Za-z0-9_])(?:{})(?:$|[^A-Za-z0-9_])", alternatives.join("|")),
        )?)
    } else if let Some(r) = &spec.regex {
        Matcher::Any(compile(name, r)?)
    } else if let Some(all) = &spec.all {
        Matcher::All(all.iter().map(|r| compile(name, r)).collect::<Result<_, _>>()?)
    } else if let Some(c) = &spec.count {
        Matcher::Count(compile(name, c)?)
    } else if let Some(labels) = &spec.labels {
        Matcher::Labels(
            labels
                .iter()
                .map(|l| Ok((l.label.clone(), compile(name, &l.regex)?)))
                .collect::<Result<_, FeatureError>>()?,
        )
    } else {
        return Err(FeatureError::MissingPattern(name.clone()));
    };
    Ok(CompiledRule {
        name: name.clone(),
        default: def.default_value.clone(),
        scope: spec.within,
        matcher,
    })
}

/// Rule-mode features with their patterns compiled once.
pub struct RuleExtractor {
    rules: Vec<CompiledRule>,
}

impl RuleExtractor {
    pub fn new(defs: &[CodeFeatureDef]) -> Result<Self, FeatureError> {
        let rules = defs
            .iter()
            .filter(|d| d.mode == ExtractionMode::Rule)
            .map(compile_rule)
            .collect::<Result<_, _>>()?;
        Ok(RuleExtractor { rules })
    }

    /// Values for the rule-mode features only.
    pub fn extract(&self, program: &str) -> CodeFeatureVector {
        let stripped = strip_comments_and_strings(&extract_cuda_sources(program));
        let bodies = kernel_bodies(&stripped).join("\n");
        let mut out = CodeFeatureVector::default();
        for rule in &self.rules {
            let text = match rule.scope {
                MatchScope::Source => stripped.as_str(),
                MatchScope::KernelBody => bodies.as_str(),
            };
            let found = match &rule.matcher {
                Matcher::Any(r) => r.is_match(text).then_some(Value::Bool(true)),
                Matcher::All(rs) => rs.iter().all(|r| r.is_match(text)).then_some(Value::Bool(true)),
                Matcher::Count(r) => {
                    let n = r.find_iter(text).count();
                    (n > 0).then_some(Value::Number(n as f64))
                }
                Matcher::Labels(ls) => ls
                    .iter()
                    .find(|(_, r)| r.is_match(text))
                    .map(|(l, _)| Value::Label(l.clone())),
            };
            match found {
                Some(v) => out.set(&rule.name, v, Provenance::Rule),
                None => out.set(&rule.name, rule.default.clone(), Provenance::Default),
            }
        }
        out
    }
}

/// Compiles `defs` and extracts their rule-mode features from `program`.
pub fn extract_rule_features(program: &str, defs: &[CodeFeatureDef]) -> Result<CodeFeatureVector, FeatureError> {
    Ok(RuleExtractor::new(defs)?.extract(program))
}

pub fn render_feature_prompt(def: &CodeFeatureDef, program: &str) -> String {
    let definition = def.prompt_spec.as_ref().map_or("", |p| p.definition.as_str());
    agents::fill(
        agents::templates::FEATURE,
        &[
            ("feature", &def.name),
            ("definition", definition),
            ("allowed", &def.value_domain.describe()),
            ("source", extract_cuda_sources(program).trim()),
        ],
    )
}

fn parse_feature_answer(reply: &str, domain: &FeatureDomain) -> Result<Value, String> {
    let text = agents::extract_block(reply, "value").unwrap_or(reply);
    domain
        .parse_answer(text)
        .ok_or_else(|| format!("answer {:?} is not {}", text.trim(), domain.describe()))
}

/// Assisted-mode features. An answer outside the allowed range is retried
/// once, then the default is used and a fault reported.
pub fn extract_assisted_features(
    program: &str,
    defs: &[CodeFeatureDef],
    backend: &mut dyn ReasoningBackend,
    round: Option<u32>,
) -> Result<(CodeFeatureVector, Vec<AgentFault>), BackendError> {
    let mut out = CodeFeatureVector::default();
    let mut faults = Vec::new();
    for def in defs.iter().filter(|d| d.mode == ExtractionMode::Assisted) {
        let prompt = render_feature_prompt(def, program);
        let answer = agents::ask(backend, Role::FeatureExtractor, round, Some(&def.name), &prompt, |r| {
            parse_feature_answer(r, &def.value_domain).map_err(Rejection::malformed)
        })?;
        match answer {
            Answer::Accepted(v) => out.set(&def.name, v, Provenance::Assisted),
            Answer::Rejected { fault, .. } => {
                out.set(&def.name, def.default_value.clone(), Provenance::Default);
                faults.push(fault);
            }
        }
    }
    Ok((out, faults))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtraction {
    pub vector: CodeFeatureVector,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub faults: Vec<AgentFault>,
    /// Set when assisted extraction could not reach the backend; assisted
    /// features are then at their defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_error: Option<String>,
}

/// The full vector: every declared feature, rule results authoritative for
/// rule features, assisted answers (or defaults) for the rest.
pub fn extract(
    program: &str,
    kb: &KnowledgeBase,
    backend: Option<&mut dyn ReasoningBackend>,
    round: Option<u32>,
) -> Result<FeatureExtraction, FeatureError> {
    let mut vector = CodeFeatureVector::defaults(kb);
    let mut faults = Vec::new();
    let mut backend_error = None;
    if let Some(backend) = backend {
        match extract_assisted_features(program, &kb.code_features, backend, round) {
            Ok((assisted, f)) => {
                vector.merge(assisted);
                faults = f;
            }
            Err(e) => backend_error = Some(e.to_string()),
        }
    }
    vector.merge(extract_rule_features(program, &kb.code_features)?);
    Ok(FeatureExtraction {
        vector,
        faults,
        backend_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_strings_are_blanked() {
        let src = "a // __shared__\nb /* float4\n x */ c \"__syncthreads()\" 'x' d";
        let s = strip_comments_and_strings(src);
        assert!(!s.contains("__shared__") && !s.contains("float4") && !s.contains("__syncthreads"));
        assert!(s.contains('a') && s.contains('b') && s.contains('c') && s.contains('d'));
        assert_eq!(s.lines().count(), src.lines().count());
        assert_eq!(strip_comments_and_strings("\"a\\\"b\" x"), "\"\" x");
    }

    #[test]
    fn python_programs_yield_their_cuda_strings() {
        let py = "\"\"\"Module docstring mentioning double.\"\"\"\nsrc = '''\n#include <cuda.h>\n__global__ void k() {}\n'''\n";
        let cuda = extract_cuda_sources(py);
        assert!(cuda.contains("__global__") && !cuda.contains("docstring"));
        assert_eq!(extract_cuda_sources("__global__ void k() {}"), "__global__ void k() {}");
    }

    #[test]
    fn kernel_bodies_skip_declarations_and_host_code() {
        let src = "__global__ void decl(int);\nvoid host() { launch<<<1,1>>>(); }\n\
                   __global__ void k(float* x, int (n)) { if (n) { x[0] = 1; } }\n";
        assert_eq!(kernel_bodies(src), vec![" if (n) { x[0] = 1; } "]);
    }
}
