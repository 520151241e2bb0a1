//! Evaluator driven by a fixture file, keyed by kernel id. Used by tests and
//! offline demos where no GPU is available.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{EvaluationBackend, EvaluationRequest, EvaluatorError, ReviewerResult, SessionFault};
use crate::profiling::{compute_speedup, parse_ncu_csv, parse_nsys_summary, KernelProfile, RawProfile, RunFeatures, TimingResult};
use crate::trajectory::CheckOutcome;
use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedKernel {
    pub compiled: bool,
    #[serde(default)]
    pub compile_log: String,
    #[serde(default)]
    pub correct: bool,
    #[serde(default)]
    pub verify_log: String,
    #[serde(default)]
    pub latency_ms: Option<f64>,
    /// Name of an entry in the fixture's `profiles`.
    #[serde(default)]
    pub profile: Option<String>,
}

/// Profiler output, inline or as captured profiler files.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedProfile {
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub run_features: BTreeMap<String, Value>,
    #[serde(default)]
    pub ncu_file: Option<String>,
    #[serde(default)]
    pub nsys_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedEvaluatorFixture {
    pub baseline_latency_ms: f64,
    #[serde(default)]
    pub profiles: BTreeMap<String, ScriptedProfile>,
    pub kernels: BTreeMap<String, ScriptedKernel>,
    /// Used for kernels not listed in `kernels`.
    #[serde(default)]
    pub default: Option<ScriptedKernel>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvaluationCall {
    pub kernel_id: String,
    pub profile: bool,
}

pub struct ScriptedEvaluator {
    fixture: ScriptedEvaluatorFixture,
    profiles: BTreeMap<String, (RawProfile, RunFeatures)>,
    calls: Vec<EvaluationCall>,
}

fn load_profile(p: &ScriptedProfile, base: &Path) -> Result<(RawProfile, RunFeatures), SessionFault> {
    let raw = match &p.ncu_file {
        Some(f) => parse_ncu_csv(&super::read(&base.join(f))?),
        None => RawProfile {
            per_kernel: vec![KernelProfile {
                kernel_name: "kernel".into(),
                launches: 1,
                metrics: p.metrics.clone(),
                ..KernelProfile::default()
            }],
            aggregate: p.metrics.clone(),
            faults: Vec::new(),
        },
    };
    let mut run = match &p.nsys_file {
        Some(f) => parse_nsys_summary(&super::read(&base.join(f))?),
        None => RunFeatures::default(),
    };
    run.values.extend(p.run_features.clone());
    Ok((raw, run))
}

impl ScriptedEvaluator {
    /// `base` resolves profiler file paths.
    pub fn new(fixture: ScriptedEvaluatorFixture, base: &Path) -> Result<Self, SessionFault> {
        let kernels = fixture.kernels.iter().map(|(k, v)| (k.as_str(), v)).chain(fixture.default.iter().map(|d| ("default", d)));
        for (id, k) in kernels {
            if k.compiled && k.correct && !k.latency_ms.is_some_and(|l| l.is_finite() && l > 0.0) {
                return Err(SessionFault::Config(format!("scripted kernel {id} passes but has no positive latency_ms")));
            }
            if let Some(p) = &k.profile {
                if !fixture.profiles.contains_key(p) {
                    return Err(SessionFault::Config(format!("scripted kernel {id} names unknown profile {p}")));
                }
            }
        }
        let profiles = fixture
            .profiles
            .iter()
            .map(|(name, p)| load_profile(p, base).map(|r| (name.clone(), r)))
            .collect::<Result<_, _>>()?;
        Ok(ScriptedEvaluator {
            fixture,
            profiles,
            calls: Vec::new(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, SessionFault> {
        let text = super::read(path)?;
        let fixture = serde_json::from_str(&text).map_err(|e| SessionFault::Config(format!("{}: {e}", path.display())))?;
        let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(fixture, &base)
    }

    pub fn calls(&self) -> &[EvaluationCall] {
        &self.calls
    }
}

impl EvaluationBackend for ScriptedEvaluator {
    fn evaluate(&mut self, request: &EvaluationRequest) -> Result<ReviewerResult, EvaluatorError> {
        self.calls.push(EvaluationCall {
            kernel_id: request.kernel_id.clone(),
            profile: request.settings.profile,
        });
        let k = self
            .fixture
            .kernels
            .get(&request.kernel_id)
            .or(self.fixture.default.as_ref())
            .ok_or_else(|| EvaluatorError::Unscripted(request.kernel_id.clone()))?;
        if !k.compiled {
            return Ok(ReviewerResult::failed_compile(k.compile_log.clone()));
        }
        let mut result = ReviewerResult::failed_compile("");
        result.compiled = CheckOutcome::pass(k.compile_log.clone());
        if !k.correct {
            result.correct = CheckOutcome::fail(k.verify_log.clone());
            return Ok(result);
        }
        result.correct = CheckOutcome::pass(k.verify_log.clone());
        let latency = k.latency_ms.expect("validated at load");
        let baseline = self.fixture.baseline_latency_ms;
        result.timing = Some(TimingResult {
            mean_latency_ms: latency,
            sample_count: request.settings.iters as usize,
            warmup_count: request.settings.warmup as usize,
            samples_ms: Vec::new(),
        });
        result.baseline_latency_ms = Some(baseline);
        result.speedup = Some(compute_speedup(baseline, latency).map_err(|e| EvaluatorError::Protocol(e.to_string()))?);
        if request.settings.profile {
            if let Some((raw, run)) = k.profile.as_ref().and_then(|p| self.profiles.get(p)) {
                result.raw_profile = Some(raw.clone());
                result.run_features = Some(run.clone());
            }
        }
        Ok(result)
    }
}
