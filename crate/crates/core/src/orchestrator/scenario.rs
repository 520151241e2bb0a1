//! Self-contained offline sessions: a task, scripted agent replies and
//! scripted evaluation results in one directory.
//!
//! ```text
//! scenario.json    {"task_id", "level", "reference", "config": {...}}
//! agents.json      scripted agent fixture
//! evaluator.json   scripted evaluator fixture
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::scripted::ScriptedEvaluator;
use super::{read, SessionConfig, SessionFault, TaskSpec};
use crate::agents::ScriptedBackend;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    task_id: String,
    #[serde(default = "super::default_level")]
    level: u32,
    reference: String,
    /// Overrides on top of the default configuration.
    #[serde(default)]
    config: SessionConfig,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub dir: PathBuf,
    pub task: TaskSpec,
    pub config: SessionConfig,
}

impl Scenario {
    pub fn load(dir: &Path) -> Result<Self, SessionFault> {
        let path = dir.join("scenario.json");
        let file: ScenarioFile =
            serde_json::from_str(&read(&path)?).map_err(|e| SessionFault::Config(format!("{}: {e}", path.display())))?;
        Ok(Scenario {
            dir: dir.to_path_buf(),
            task: TaskSpec {
                task_id: file.task_id,
                level: file.level,
                reference_source: read(&dir.join(&file.reference))?,
            },
            config: file.config,
        })
    }

    pub fn agents(&self) -> Result<ScriptedBackend, SessionFault> {
        ScriptedBackend::from_file(&self.dir.join("agents.json")).map_err(|e| SessionFault::Config(e.to_string()))
    }

    pub fn evaluator(&self) -> Result<ScriptedEvaluator, SessionFault> {
        ScriptedEvaluator::from_file(&self.dir.join("evaluator.json"))
    }
}
