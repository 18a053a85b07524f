//! Run directory persistence.
//!
//! Layout under the run root:
//!
//! ```text
//! config.json              run configuration (schema_version inside)
//! pool.json                the example pool
//! events.jsonl             append-only event log, one JSON object per line
//! ledger.json              budget ledger snapshot
//! agents/<id>/agent.json   agent metadata
//! agents/<id>/artifact/    agent files
//! iterations/<NNNN>/       examples, outcomes/<agent>.json, report.{txt,json},
//!                          elo.json, iteration.json
//! sessions/<id>/           mutator workspace for the agent
//! run.lock                 present while a writer holds the directory
//! ```
//!
//! Paths stored inside records are relative to the run root so that two runs
//! of the same configuration produce identical logs.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{AgentRecord, EngineConfig, IterationRecord};
use crate::error::{Error, Result};
use crate::evaluation::{EvaluationRecord, OutcomeSink};
use crate::plugin::MutationPhase;

pub const SCHEMA_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.json";
pub const POOL_FILE: &str = "pool.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const LEDGER_FILE: &str = "ledger.json";
const LOCK_FILE: &str = "run.lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    RunStarted {
        schema_version: u32,
        config: EngineConfig,
        pool_size: usize,
    },
    AgentCreated {
        agent: AgentRecord,
    },
    AgentRevised {
        agent_id: String,
        revision: u32,
        iteration: u64,
    },
    Evaluated(EvaluationRecord),
    IterationCompleted {
        record: IterationRecord,
    },
    CompetitorsSelected {
        iteration: u64,
        winner_id: String,
        third_id: Option<String>,
    },
    MutationFailed {
        iteration: u64,
        phase: MutationPhase,
        reason: String,
    },
    DeepFocus {
        iteration: u64,
        agent_id: String,
        source_iteration: Option<u64>,
        debits: u64,
        revised: bool,
        note: String,
    },
    RunFinished {
        best_agent_id: String,
        iterations: u64,
        spent: u64,
    },
}

pub fn iteration_dir(index: u64) -> PathBuf {
    PathBuf::from("iterations").join(format!("{index:04}"))
}

pub fn agent_dir(agent_id: &str) -> PathBuf {
    PathBuf::from("agents").join(agent_id)
}

pub fn artifact_dir(agent_id: &str) -> PathBuf {
    agent_dir(agent_id).join("artifact")
}

pub fn session_dir(agent_id: &str) -> PathBuf {
    PathBuf::from("sessions").join(agent_id)
}

/// Slash-separated form of a relative path, as stored in records.
pub fn rel_string(path: &Path) -> String {
    path.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Single writer handle on a run directory.
pub struct RunStore {
    root: PathBuf,
    events: File,
    _lock: LockGuard,
}

impl RunStore {
    /// Creates a new run directory. `root` must not exist or be empty.
    pub fn create(root: &Path) -> Result<Self> {
        if root.exists() && fs::read_dir(root)?.next().is_some() {
            return Err(Error::config(format!(
                "run directory {} is not empty",
                root.display()
            )));
        }
        fs::create_dir_all(root)?;
        let root = root.canonicalize()?;
        let lock_path = root.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock_path)
            .map_err(|_| Error::Locked(root.clone()))?;
        let lock = LockGuard(lock_path);
        for sub in ["agents", "iterations", "sessions"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let events = OpenOptions::new()
            .create(true)
            .append(true)
            .open(root.join(EVENTS_FILE))?;
        Ok(RunStore {
            root,
            events,
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn append(&mut self, event: &Event) -> Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.events.write_all(&line)?;
        self.events.flush()?;
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(
        &self,
        rel: impl AsRef<Path>,
        value: &T,
    ) -> Result<()> {
        let mut body = serde_json::to_vec_pretty(value)?;
        body.push(b'\n');
        self.write_bytes(rel, &body)
    }

    pub fn write_text(&self, rel: impl AsRef<Path>, text: &str) -> Result<()> {
        self.write_bytes(rel, text.as_bytes())
    }

    fn write_bytes(&self, rel: impl AsRef<Path>, body: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, body)?;
        Ok(())
    }
}

impl OutcomeSink for RunStore {
    fn record(&mut self, record: &EvaluationRecord) -> Result<()> {
        self.append(&Event::Evaluated(record.clone()))
    }
}

pub fn read_json<T: DeserializeOwned>(root: &Path, rel: impl AsRef<Path>) -> Result<T> {
    let path = root.join(rel.as_ref());
    let body = fs::read(&path)
        .map_err(|e| Error::integrity(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&body)
        .map_err(|e| Error::integrity(format!("{} is malformed: {e}", path.display())))
}

pub fn read_events(root: &Path) -> Result<Vec<Event>> {
    let path = root.join(EVENTS_FILE);
    let file = File::open(&path)
        .map_err(|e| Error::integrity(format!("cannot open {}: {e}", path.display())))?;
    let mut events = Vec::new();
    for (number, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line)
            .map_err(|e| Error::integrity(format!("{EVENTS_FILE} line {}: {e}", number + 1)))?;
        events.push(event);
    }
    Ok(events)
}

/// Recursively copies `src` into `dst` (created if missing).
pub fn copy_dir(src: &Path, dst: &Path) -> Result<()> {
    fs::create_dir_all(dst)?;
    for entry in fs::read_dir(src)? {
        let entry = entry?;
        let target = dst.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

/// Marks every file under `dir` read-only (directories stay writable so the
/// tree can still be removed).
pub fn make_read_only(dir: &Path) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            make_read_only(&entry.path())?;
        } else {
            let mut perms = entry.metadata()?.permissions();
            perms.set_readonly(true);
            fs::set_permissions(entry.path(), perms)?;
        }
    }
    Ok(())
}

/// Content hash of a directory tree (relative paths and file bytes).
pub fn hash_dir(dir: &Path) -> Result<String> {
    fn walk(base: &Path, dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                walk(base, &entry.path(), files)?;
            } else {
                files.push(
                    entry
                        .path()
                        .strip_prefix(base)
                        .expect("under base")
                        .to_path_buf(),
                );
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    if dir.exists() {
        walk(dir, dir, &mut files)?;
    }
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let body = fs::read(dir.join(&rel))?;
        hasher.update(rel_string(&rel).as_bytes());
        hasher.update([0]);
        hasher.update((body.len() as u64).to_le_bytes());
        hasher.update(&body);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn dir_has_files(dir: &Path) -> bool {
    fs::read_dir(dir)
        .map(|mut it| it.next().is_some())
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_refuses_non_empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "1").unwrap();
        assert!(RunStore::create(dir.path()).is_err());
    }

    #[test]
    fn second_writer_is_locked_out() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let store = RunStore::create(&root).unwrap();
        fs::remove_file(root.join(EVENTS_FILE)).unwrap();
        fs::remove_dir_all(root.join("agents")).unwrap();
        fs::remove_dir_all(root.join("iterations")).unwrap();
        fs::remove_dir_all(root.join("sessions")).unwrap();
        // Only the lock file remains, so the directory is non-empty.
        assert!(RunStore::create(&root).is_err());
        drop(store);
        assert!(!root.join(LOCK_FILE).exists());
    }

    #[test]
    fn events_round_trip_line_by_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RunStore::create(&dir.path().join("r")).unwrap();
        let event = Event::MutationFailed {
            iteration: 3,
            phase: MutationPhase::Create,
            reason: "exit 1".into(),
        };
        store.append(&event).unwrap();
        store.append(&event).unwrap();
        let events = read_events(store.root()).unwrap();
        assert_eq!(events, vec![event.clone(), event]);
    }

    #[test]
    fn corrupt_event_line_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("r");
        let store = RunStore::create(&root).unwrap();
        fs::write(root.join(EVENTS_FILE), "{\"event\":\"nope\"}\n").unwrap();
        let err = read_events(store.root()).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn dir_hash_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a/b")).unwrap();
        fs::write(dir.path().join("a/b/f"), "one").unwrap();
        let h1 = hash_dir(dir.path()).unwrap();
        assert_eq!(h1, hash_dir(dir.path()).unwrap());
        fs::write(dir.path().join("a/b/f"), "two").unwrap();
        assert_ne!(h1, hash_dir(dir.path()).unwrap());

        let copy = tempfile::tempdir().unwrap();
        copy_dir(dir.path(), copy.path()).unwrap();
        assert_eq!(
            hash_dir(dir.path()).unwrap(),
            hash_dir(copy.path()).unwrap()
        );
    }
}
