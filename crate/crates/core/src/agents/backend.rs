//! Reasoning backends: a scripted one for tests and replay, and an HTTP
//! chat-completion client for live runs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Diagnoser,
    Planner,
    Optimizer,
    Repairer,
    FeatureExtractor,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Generator => "generator",
            Role::Diagnoser => "diagnoser",
            Role::Planner => "planner",
            Role::Optimizer => "optimizer",
            Role::Repairer => "repairer",
            Role::FeatureExtractor => "feature_extractor",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One call to a backend. `round`, `slot` and `attempt` are routing hints
/// for the scripted backend; live backends only see `prompt`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRequest {
    pub role: Role,
    pub prompt: String,
    pub round: Option<u32>,
    /// Sub-call discriminator within a round, e.g. `seed1` or a feature name.
    pub slot: Option<String>,
    /// 1 for the first try, 2 for the validation retry.
    pub attempt: u32,
}

impl AgentRequest {
    pub fn prompt_digest(&self) -> String {
        prompt_digest(&self.prompt)
    }
}

pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub model: String,
    pub temperature: f64,
    pub max_context: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("no scripted response for {role} (round {round:?}, slot {slot:?}, attempt {attempt})")]
    NoScriptedResponse {
        role: Role,
        round: Option<u32>,
        slot: Option<String>,
        attempt: u32,
    },
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("cannot load scripted responses from {path}: {detail}")]
    Fixture { path: PathBuf, detail: String },
}

pub trait ReasoningBackend {
    fn capabilities(&self) -> Capabilities;
    fn complete(&mut self, request: &AgentRequest) -> Result<String, BackendError>;
}

impl<B: ReasoningBackend + ?Sized> ReasoningBackend for Box<B> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn complete(&mut self, request: &AgentRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

/// A backend that is never reachable; useful when no backend is configured.
#[derive(Debug, Default, Clone, Copy)]
pub struct OfflineBackend;

impl ReasoningBackend for OfflineBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            model: "offline".into(),
            temperature: 0.0,
            max_context: 0,
        }
    }
    fn complete(&mut self, _request: &AgentRequest) -> Result<String, BackendError> {
        Err(BackendError::Unavailable("no reasoning backend configured".into()))
    }
}

/// One canned reply. Every selector that is present must match; among the
/// matching entries the most specific wins, earlier entries break ties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedEntry {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Path relative to the fixture file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_file: Option<String>,
}

impl ScriptedEntry {
    fn specificity(&self, req: &AgentRequest, digest: &str) -> Option<u32> {
        if self.role != req.role {
            return None;
        }
        let mut score = 0;
        if let Some(d) = &self.prompt_sha256 {
            if d != digest {
                return None;
            }
            score += 8;
        }
        if let Some(r) = self.round {
            if Some(r) != req.round {
                return None;
            }
            score += 4;
        }
        if let Some(s) = &self.slot {
            if Some(s) != req.slot.as_ref() {
                return None;
            }
            score += 2;
        }
        if let Some(a) = self.attempt {
            if a != req.attempt {
                return None;
            }
            score += 1;
        }
        Some(score)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedFixture {
    #[serde(default = "default_model")]
    pub model: String,
    pub responses: Vec<ScriptedEntry>,
}

fn default_model() -> String {
    "scripted".into()
}

/// A record of one call made to the scripted backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedCall {
    pub role: Role,
    pub round: Option<u32>,
    pub slot: Option<String>,
    pub attempt: u32,
    pub prompt_sha256: String,
    pub prompt: String,
}

/// Deterministic backend answering from a fixture document.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    fixture: ScriptedFixture,
    /// Resolved reply text per entry.
    replies: Vec<String>,
    calls: Vec<RecordedCall>,
}

impl ScriptedBackend {
    pub fn new(fixture: ScriptedFixture) -> Result<Self, BackendError> {
        Self::with_base(fixture, Path::new("."))
    }

    fn with_base(fixture: ScriptedFixture, base: &Path) -> Result<Self, BackendError> {
        let mut replies = Vec::with_capacity(fixture.responses.len());
        for (i, e) in fixture.responses.iter().enumerate() {
            let text = match (&e.response, &e.response_file) {
                (Some(t), None) => t.clone(),
                (None, Some(f)) => {
                    let path = base.join(f);
                    std::fs::read_to_string(&path).map_err(|err| BackendError::Fixture {
                        path: path.clone(),
                        detail: err.to_string(),
                    })?
                }
                _ => {
                    return Err(BackendError::Fixture {
                        path: base.to_path_buf(),
                        detail: format!("responses[{i}] needs exactly one of response or response_file"),
                    })
                }
            };
            replies.push(text);
        }
        Ok(ScriptedBackend {
            fixture,
            replies,
            calls: Vec::new(),
        })
    }

    /// Loads a fixture document; `response_file` paths resolve next to it.
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::Fixture {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let fixture: ScriptedFixture = serde_json::from_str(&text).map_err(|e| BackendError::Fixture {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Self::with_base(fixture, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn calls(&self) -> &[RecordedCall] {
        &self.calls
    }
}

impl ReasoningBackend for ScriptedBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            model: self.fixture.model.clone(),
            temperature: 0.0,
            max_context: usize::MAX,
        }
    }

    fn complete(&mut self, request: &AgentRequest) -> Result<String, BackendError> {
        let digest = request.prompt_digest();
        self.calls.push(RecordedCall {
            role: request.role,
            round: request.round,
            slot: request.slot.clone(),
            attempt: request.attempt,
            prompt_sha256: digest.clone(),
            prompt: request.prompt.clone(),
        });
        let mut best: Option<(u32, usize)> = None;
        for (i, e) in self.fixture.responses.iter().enumerate() {
            if let Some(score) = e.specificity(request, &digest) {
                if best.is_none_or(|(s, _)| score > s) {
                    best = Some((score, i));
                }
            }
        }
        match best {
            Some((_, i)) => Ok(self.replies[i].clone()),
            None => Err(BackendError::NoScriptedResponse {
                role: request.role,
                round: request.round,
                slot: request.slot.clone(),
                attempt: request.attempt,
            }),
        }
    }
}

pub const ENV_ENDPOINT: &str = "KERNTUNE_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "KERNTUNE_LLM_API_KEY";
pub const ENV_MODEL: &str = "KERNTUNE_LLM_MODEL";
pub const ENV_TEMPERATURE: &str = "KERNTUNE_LLM_TEMPERATURE";
pub const ENV_MAX_CONTEXT: &str = "KERNTUNE_LLM_MAX_CONTEXT";

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_context: usize,
    pub timeout: Duration,
}

impl HttpConfig {
    /// Reads the configuration from the process environment.
    pub fn from_env() -> Result<Self, BackendError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, BackendError> {
        let endpoint = get(ENV_ENDPOINT)
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| BackendError::Unavailable(format!("{ENV_ENDPOINT} is not set")))?;
        let temperature = match get(ENV_TEMPERATURE) {
            Some(t) => t
                .trim()
                .parse::<f64>()
                .map_err(|_| BackendError::Unavailable(format!("{ENV_TEMPERATURE} is not a number: {t:?}")))?,
            None => 1.0,
        };
        let max_context = match get(ENV_MAX_CONTEXT) {
            Some(t) => t
                .trim()
                .parse::<usize>()
                .map_err(|_| BackendError::Unavailable(format!("{ENV_MAX_CONTEXT} is not a count: {t:?}")))?,
            None => 128_000,
        };
        Ok(HttpConfig {
            endpoint,
            api_key: get(ENV_API_KEY).filter(|s| !s.is_empty()),
            model: get(ENV_MODEL).unwrap_or_else(|| "default".into()),
            temperature,
            max_context,
            timeout: Duration::from_secs(600),
        })
    }
}

/// Chat-completion client (`{"model", "temperature", "messages"}` in,
/// `choices[0].message.content` out).
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

const SYSTEM_PROMPT: &str = "You are one agent in a CUDA kernel engineering pipeline. \
Follow the reply format requested in the user message exactly.";

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend { config, agent }
    }
}

impl ReasoningBackend for HttpBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            model: self.config.model.clone(),
            temperature: self.config.temperature,
            max_context: self.config.max_context,
        }
    }

    fn complete(&mut self, request: &AgentRequest) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": request.prompt},
            ],
        });
        let mut call = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(&body)
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        if status >= 400 {
            let snippet: String = text.chars().take(200).collect();
            return Err(if status >= 500 || status == 429 {
                BackendError::Unavailable(format!("HTTP {status}: {snippet}"))
            } else {
                BackendError::Protocol(format!("HTTP {status}: {snippet}"))
            });
        }
        let doc: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("response is not JSON: {e}")))?;
        doc.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol("response has no choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(role: Role, round: Option<u32>, slot: Option<&str>, attempt: u32) -> AgentRequest {
        AgentRequest {
            role,
            prompt: "p".into(),
            round,
            slot: slot.map(str::to_string),
            attempt,
        }
    }

    fn entry(role: Role, round: Option<u32>, attempt: Option<u32>, text: &str) -> ScriptedEntry {
        ScriptedEntry {
            role,
            prompt_sha256: None,
            round,
            slot: None,
            attempt,
            response: Some(text.into()),
            response_file: None,
        }
    }

    #[test]
    fn most_specific_entry_wins() {
        let mut b = ScriptedBackend::new(ScriptedFixture {
            model: "m".into(),
            responses: vec![
                entry(Role::Planner, None, None, "any"),
                entry(Role::Planner, Some(2), None, "round2"),
                entry(Role::Planner, Some(2), Some(2), "round2-retry"),
            ],
        })
        .unwrap();
        assert_eq!(b.complete(&req(Role::Planner, Some(1), None, 1)).unwrap(), "any");
        assert_eq!(b.complete(&req(Role::Planner, Some(2), None, 1)).unwrap(), "round2");
        assert_eq!(b.complete(&req(Role::Planner, Some(2), None, 2)).unwrap(), "round2-retry");
        assert!(matches!(
            b.complete(&req(Role::Optimizer, Some(2), None, 1)),
            Err(BackendError::NoScriptedResponse { .. })
        ));
        assert_eq!(b.calls().len(), 4);
    }

    #[test]
    fn digest_selector_beats_round() {
        let mut by_digest = entry(Role::Diagnoser, None, None, "digest");
        by_digest.prompt_sha256 = Some(prompt_digest("p"));
        let mut b = ScriptedBackend::new(ScriptedFixture {
            model: "m".into(),
            responses: vec![entry(Role::Diagnoser, Some(3), Some(1), "round"), by_digest],
        })
        .unwrap();
        assert_eq!(b.complete(&req(Role::Diagnoser, Some(3), None, 1)).unwrap(), "digest");
    }

    #[test]
    fn env_configuration() {
        let cfg = HttpConfig::from_lookup(|k| match k {
            ENV_ENDPOINT => Some("http://localhost:1/v1/chat/completions".into()),
            ENV_MODEL => Some("m".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.temperature, 1.0);
        assert_eq!(cfg.api_key, None);
        assert!(matches!(
            HttpConfig::from_lookup(|_| None),
            Err(BackendError::Unavailable(_))
        ));
    }
}
