//! Evaluator that talks to an external harness process over line-delimited
//! JSON on stdin/stdout.
//!
//! The orchestrator writes one request per line and reads exactly one
//! response line per request. A `hello` exchange at start-up checks the
//! protocol version; `shutdown` is sent when the evaluator is dropped.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EvaluationBackend, EvaluationRequest, EvaluationSettings, EvaluatorError, ReviewerResult};
use crate::profiling::{parse_ncu_csv, parse_nsys_summary, TimingResult};
use crate::trajectory::CheckOutcome;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub protocol_version: u32,
    pub action: String,
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<EvaluationSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub protocol_version: u32,
    pub request_id: u64,
    /// Set when the harness could not process the request at all.
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub compiled: bool,
    #[serde(default)]
    pub compile_log: String,
    #[serde(default)]
    pub correct: bool,
    #[serde(default)]
    pub verify_log: String,
    #[serde(default)]
    pub mean_latency_ms: Option<f64>,
    #[serde(default)]
    pub samples_ms: Vec<f64>,
    #[serde(default)]
    pub baseline_latency_ms: Option<f64>,
    #[serde(default)]
    pub speedup: Option<f64>,
    /// Raw CSV export of the kernel-level profiler.
    #[serde(default)]
    pub ncu_csv: Option<String>,
    /// Kernel summary table of the system-level profiler.
    #[serde(default)]
    pub nsys_summary: Option<String>,
}

impl WireResponse {
    /// Converts a response to a reviewer result, checking it belongs to
    /// `request_id` and carries timing when it claims a pass.
    pub fn into_result(self, request_id: u64, settings: &EvaluationSettings) -> Result<ReviewerResult, EvaluatorError> {
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(EvaluatorError::Protocol(format!(
                "protocol version {} (expected {PROTOCOL_VERSION})",
                self.protocol_version
            )));
        }
        if self.request_id != request_id {
            return Err(EvaluatorError::Protocol(format!(
                "response for request {} while waiting for {request_id}",
                self.request_id
            )));
        }
        if let Some(e) = self.error {
            return Err(EvaluatorError::Protocol(format!("harness error: {e}")));
        }
        let passed = self.compiled && self.correct;
        let timing = match (passed, self.mean_latency_ms) {
            (true, Some(mean)) if mean.is_finite() && mean > 0.0 => Some(TimingResult {
                mean_latency_ms: mean,
                sample_count: if self.samples_ms.is_empty() { settings.iters as usize } else { self.samples_ms.len() },
                warmup_count: settings.warmup as usize,
                samples_ms: self.samples_ms,
            }),
            (true, other) => {
                return Err(EvaluatorError::Protocol(format!(
                    "passing kernel without a positive mean latency ({other:?})"
                )))
            }
            (false, _) => None,
        };
        Ok(ReviewerResult {
            compiled: if self.compiled { CheckOutcome::pass(self.compile_log) } else { CheckOutcome::fail(self.compile_log) },
            correct: match (self.compiled, self.correct) {
                (false, false) => CheckOutcome::skipped(),
                (_, true) => CheckOutcome::pass(self.verify_log),
                (true, false) => CheckOutcome::fail(self.verify_log),
            },
            timing,
            baseline_latency_ms: self.baseline_latency_ms,
            speedup: self.speedup,
            raw_profile: self.ncu_csv.as_deref().map(parse_ncu_csv),
            run_features: self.nsys_summary.as_deref().map(parse_nsys_summary),
        })
    }
}

pub struct HarnessEvaluator {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    timeout: Duration,
}

impl HarnessEvaluator {
    /// Spawns `program args...` and performs the version handshake.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self, EvaluatorError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| EvaluatorError::Gone(format!("cannot start {program}: {e}")))?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut h = HarnessEvaluator {
            stdin: child.stdin.take(),
            child,
            lines: rx,
            next_id: 0,
            timeout,
        };
        let id = h.send("hello", None)?;
        let reply = h.receive()?;
        if reply.protocol_version != PROTOCOL_VERSION || reply.request_id != id {
            return Err(EvaluatorError::Gone(format!(
                "handshake failed: version {} request {}",
                reply.protocol_version, reply.request_id
            )));
        }
        Ok(h)
    }

    fn send(&mut self, action: &str, request: Option<&EvaluationRequest>) -> Result<u64, EvaluatorError> {
        self.next_id += 1;
        let wire = WireRequest {
            protocol_version: PROTOCOL_VERSION,
            action: action.to_string(),
            request_id: self.next_id,
            task_id: request.map(|r| r.task_id.clone()),
            kernel_id: request.map(|r| r.kernel_id.clone()),
            kernel_source: request.map(|r| r.kernel_source.clone()),
            reference_source: request.map(|r| r.reference_source.clone()),
            config: request.map(|r| r.settings.clone()),
        };
        let mut line = serde_json::to_string(&wire).expect("requests serialize");
        line.push('\n');
        let stdin = self.stdin.as_mut().ok_or_else(|| EvaluatorError::Gone("harness input closed".into()))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| EvaluatorError::Gone(format!("writing to harness: {e}")))?;
        Ok(self.next_id)
    }

    fn receive(&mut self) -> Result<WireResponse, EvaluatorError> {
        let line = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(EvaluatorError::Gone(format!("reading from harness: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Err(EvaluatorError::Gone(format!("no response within {:?}", self.timeout)))
            }
            Err(RecvTimeoutError::Disconnected) => return Err(EvaluatorError::Gone("harness exited".into())),
        };
        serde_json::from_str(&line).map_err(|e| EvaluatorError::Protocol(format!("unreadable response: {e}")))
    }
}

impl EvaluationBackend for HarnessEvaluator {
    fn evaluate(&mut self, request: &EvaluationRequest) -> Result<ReviewerResult, EvaluatorError> {
        let id = self.send("evaluate", Some(request))?;
        self.receive()?.into_result(id, &request.settings)
    }
}

impl Drop for HarnessEvaluator {
    fn drop(&mut self) {
        if self.send("shutdown", None).is_ok() {
            let _ = self.lines.recv_timeout(Duration::from_secs(5));
        }
        self.stdin = None;
        if !matches!(self.child.try_wait(), Ok(Some(_))) {
            std::thread::sleep(Duration::from_millis(50));
            if !matches!(self.child.try_wait(), Ok(Some(_))) {
                let _ = self.child.kill();
            }
        }
        let _ = self.child.wait();
    }
}
