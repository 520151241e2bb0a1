//! On-disk session logs.
//!
//! Layout under a session directory:
//!
//! ```text
//! session.json      task, config, knowledge-base fingerprint, checkpoint
//! seeds.json        seed candidates, their reviews and the selection
//! rounds/NNN.json   one file per round
//! result.json       final result, once the session completes
//! ```
//!
//! All maps are ordered and nothing time-dependent is written, so two runs
//! with the same inputs produce byte-identical logs.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read, Checkpoint, RoundLog, SeedLog, SessionConfig, SessionFault, SessionResult, TaskSpec};
use crate::kb::KnowledgeBase;
use crate::trajectory::SessionState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDocument {
    pub task: TaskSpec,
    pub config: SessionConfig,
    /// sha256 of the knowledge base the session started with.
    pub kb_fingerprint: String,
    pub checkpoint: Checkpoint,
}

impl SessionDocument {
    pub fn check_kb(&self, kb: &KnowledgeBase) -> Result<(), SessionFault> {
        let now = kb_fingerprint(kb);
        if now != self.kb_fingerprint {
            return Err(SessionFault::Resume(format!(
                "knowledge base changed since the session started ({} vs {})",
                &self.kb_fingerprint[..12.min(self.kb_fingerprint.len())],
                &now[..12]
            )));
        }
        Ok(())
    }
}

pub fn kb_fingerprint(kb: &KnowledgeBase) -> String {
    let text = serde_json::to_string(&kb.to_bundle()).expect("knowledge base serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone)]
pub struct SessionLog {
    dir: PathBuf,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SessionFault + '_ {
    move |source| SessionFault::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SessionFault> {
    let mut text = serde_json::to_string_pretty(value).expect("log records serialize");
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, SessionFault> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| SessionFault::Resume(format!("{}: {e}", path.display())))
}

impl SessionLog {
    /// Starts a new log; refuses a directory that already holds a session.
    pub fn create(dir: &Path) -> Result<Self, SessionFault> {
        if dir.join("session.json").exists() {
            return Err(SessionFault::Config(format!(
                "{} already holds a session; resume it or remove it first",
                dir.display()
            )));
        }
        let rounds = dir.join("rounds");
        std::fs::create_dir_all(&rounds).map_err(io(&rounds))?;
        Ok(SessionLog { dir: dir.to_path_buf() })
    }

    pub fn open(dir: &Path) -> Result<Self, SessionFault> {
        if !dir.join("session.json").is_file() {
            return Err(SessionFault::Resume(format!("{} holds no session.json", dir.display())));
        }
        Ok(SessionLog { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn round_path(&self, round: u32) -> PathBuf {
        self.dir.join("rounds").join(format!("{round:03}.json"))
    }

    pub fn write_session(
        &self,
        task: &TaskSpec,
        config: &SessionConfig,
        kb: &KnowledgeBase,
        checkpoint: &Checkpoint,
    ) -> Result<(), SessionFault> {
        let doc = SessionDocument {
            task: task.clone(),
            config: config.clone(),
            kb_fingerprint: kb_fingerprint(kb),
            checkpoint: checkpoint.clone(),
        };
        write_json(&self.dir.join("session.json"), &doc)
    }

    pub fn read_session(&self) -> Result<SessionDocument, SessionFault> {
        read_json(&self.dir.join("session.json"))
    }

    pub fn write_seeds(&self, seeds: &SeedLog) -> Result<(), SessionFault> {
        write_json(&self.dir.join("seeds.json"), seeds)
    }

    pub fn read_seeds(&self) -> Result<SeedLog, SessionFault> {
        read_json(&self.dir.join("seeds.json"))
    }

    pub fn write_round(&self, round: &RoundLog) -> Result<(), SessionFault> {
        write_json(&self.round_path(round.round_index), round)
    }

    /// Round logs 1..=n, stopping at the first gap.
    pub fn read_rounds(&self) -> Result<Vec<RoundLog>, SessionFault> {
        let mut out = Vec::new();
        for i in 1.. {
            let p = self.round_path(i);
            if !p.is_file() {
                break;
            }
            out.push(read_json(&p)?);
        }
        Ok(out)
    }

    pub fn write_result(&self, result: &SessionResult) -> Result<(), SessionFault> {
        write_json(&self.dir.join("result.json"), result)
    }

    pub fn read_result(&self) -> Result<Option<SessionResult>, SessionFault> {
        let p = self.dir.join("result.json");
        if p.is_file() {
            read_json(&p).map(Some)
        } else {
            Ok(None)
        }
    }
}

/// Outcome of rebuilding a session's memory from its logs alone.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub rounds: u32,
    /// Rounds whose logged promotion decision differs from the re-derived one.
    pub promotion_mismatches: Vec<u32>,
    /// Top-level state fields that differ from the checkpoint.
    pub differences: Vec<String>,
    pub state: SessionState,
}

impl ReplayReport {
    pub fn consistent(&self) -> bool {
        self.promotion_mismatches.is_empty() && self.differences.is_empty()
    }
}

/// Rebuilds the trajectory memory from `seeds.json` and the round logs and
/// compares it with the checkpoint in `session.json`.
pub fn replay_from_logs(dir: &Path) -> Result<ReplayReport, SessionFault> {
    let log = SessionLog::open(dir)?;
    let doc = log.read_session()?;
    let seeds = log.read_seeds()?;
    let mut state = SessionState::new(doc.config.rt, doc.config.at);
    if let Some(choice) = seeds.choice {
        let review = seeds
            .reviews
            .get(choice.index)
            .ok_or_else(|| SessionFault::Resume("seed choice points past the reviews".into()))?;
        let id = &seeds
            .candidates
            .get(choice.index)
            .ok_or_else(|| SessionFault::Resume("seed choice points past the candidates".into()))?
            .kernel_id;
        state.start_from_seed(id, review.compiled.clone(), review.correct.clone(), review.effective_speedup());
    }
    let mut promotion_mismatches = Vec::new();
    let rounds = log.read_rounds()?;
    for round in &rounds {
        state.record_round(round.record.clone())?;
        let derived = match (&round.record.kernel_id, &round.record.profile) {
            (Some(id), Some(p)) => Some(state.consider_promotion(id, p.speedup)),
            _ => None,
        };
        if derived != round.promotion {
            promotion_mismatches.push(round.round_index);
        }
    }
    let mut differences = Vec::new();
    let rebuilt = serde_json::to_value(&state).expect("state serializes");
    let saved = serde_json::to_value(&doc.checkpoint.state).expect("state serializes");
    if let (Some(a), Some(b)) = (rebuilt.as_object(), saved.as_object()) {
        for (k, v) in a {
            if b.get(k) != Some(v) {
                differences.push(k.clone());
            }
        }
    }
    Ok(ReplayReport {
        rounds: rounds.len() as u32,
        promotion_mismatches,
        differences,
        state,
    })
}
