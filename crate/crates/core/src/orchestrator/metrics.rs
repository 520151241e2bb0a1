//! Benchmark-level summary metrics over finished sessions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: String,
    pub level: u32,
    /// A compiling, correct kernel was found.
    pub success: bool,
    /// Best speedup over the reference, if any kernel was timed.
    pub best_speedup: Option<f64>,
}

impl TaskOutcome {
    /// Speedup credited to the task: failed tasks count as zero.
    pub fn credited_speedup(&self) -> f64 {
        if self.success {
            self.best_speedup.unwrap_or(0.0)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tasks: usize,
    /// Share of tasks with a correct kernel.
    pub success_rate: f64,
    /// Mean best speedup, failed tasks counting as zero.
    pub mean_speedup: f64,
    /// Share of tasks that are correct and at least as fast as the reference.
    pub fast1: f64,
    /// Mean speedup divided by the round budget.
    pub per_round_efficiency: f64,
    pub max_rounds: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no task outcomes to summarize")]
    Empty,
    #[error("round budget must be at least 1")]
    ZeroRounds,
}

pub fn compute_metrics(outcomes: &[TaskOutcome], max_rounds: u32) -> Result<MetricsReport, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    if max_rounds == 0 {
        return Err(MetricsError::ZeroRounds);
    }
    let n = outcomes.len() as f64;
    let successes = outcomes.iter().filter(|o| o.success).count() as f64;
    let mean_speedup = outcomes.iter().map(TaskOutcome::credited_speedup).sum::<f64>() / n;
    let fast = outcomes.iter().filter(|o| o.success && o.best_speedup.is_some_and(|s| s >= 1.0)).count() as f64;
    Ok(MetricsReport {
        tasks: outcomes.len(),
        success_rate: successes / n,
        mean_speedup,
        fast1: fast / n,
        per_round_efficiency: mean_speedup / f64::from(max_rounds),
        max_rounds,
    })
}

/// Metrics per difficulty level.
pub fn metrics_by_level(outcomes: &[TaskOutcome], max_rounds: u32) -> Result<BTreeMap<u32, MetricsReport>, MetricsError> {
    let mut groups: BTreeMap<u32, Vec<TaskOutcome>> = BTreeMap::new();
    for o in outcomes {
        groups.entry(o.level).or_default().push(o.clone());
    }
    groups
        .into_iter()
        .map(|(level, g)| compute_metrics(&g, max_rounds).map(|m| (level, m)))
        .collect()
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tasks={} success_rate={:.4} mean_speedup={:.4} fast1={:.4} per_round={:.4}",
            self.tasks, self.success_rate, self.mean_speedup, self.fast1, self.per_round_efficiency
        )
    }
}
