//! Durable, resumable session persistence with two interchangeable
//! implementations: a directory of per-job record files and an indexed
//! append-only single-file store. Both satisfy the same contract and the
//! engine runs unchanged on either.

mod dir;
mod log;

pub use dir::DirStore;
pub use log::LogStore;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Attempt, Job};

pub const SCHEMA_VERSION: u32 = 1;

/// Self-describing serialized job; the schema version travels with every
/// record so a mismatched reader fails loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobRecord {
    pub schema_version: u32,
    pub job: Job,
}

impl JobRecord {
    pub fn new(job: &Job) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            job: job.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("corrupt record for job {job_id}: {detail}")]
    CorruptRecord { job_id: String, detail: String },
    #[error("schema mismatch: found version {found}, expected {expected}")]
    SchemaMismatch { found: u32, expected: u32 },
    #[error("session already locked by pid {pid} ({path})")]
    Locked { pid: u32, path: PathBuf },
    #[error("serialization failure: {0}")]
    Serde(#[from] serde_json::Error),
}

/// A record that failed to decode; reported to the caller, never silently
/// dropped.
#[derive(Debug, Clone)]
pub struct CorruptRecord {
    pub job_id: String,
    pub detail: String,
}

#[derive(Debug, Default)]
pub struct LoadOutcome {
    pub jobs: Vec<Job>,
    pub corrupt: Vec<CorruptRecord>,
}

/// Session persistence contract. Writes are durable and atomic on return:
/// a crash mid-write never leaves a reader-visible torn record, and the
/// most recent complete record for a job always survives.
pub trait Store: Send {
    /// Durably overwrite the record for `job.id` (last writer wins).
    fn save_job(&mut self, job: &Job) -> Result<(), StoreError>;

    /// Durably upsert one attempt, keyed by (job_id, attempt.index);
    /// replaying the same append after a crash is idempotent.
    fn record_attempt(&mut self, job_id: &str, attempt: &Attempt) -> Result<(), StoreError>;

    /// Decode every job record; corrupt records are quarantined and
    /// reported per job id.
    fn load_all(&mut self) -> Result<LoadOutcome, StoreError>;
}

/// Which store implementation backs a session directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreKind {
    /// Indexed single-file store (`state.db`), the default.
    Indexed,
    /// One record file per job under `jobs/`, kept for debugging.
    Dir,
}

impl std::str::FromStr for StoreKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "indexed" => Ok(StoreKind::Indexed),
            "dir" => Ok(StoreKind::Dir),
            other => Err(format!("unknown store kind `{other}` (indexed|dir)")),
        }
    }
}

/// Open (creating if needed) the store of the given kind in `session_dir`.
pub fn open_store(session_dir: &Path, kind: StoreKind) -> Result<Box<dyn Store>, StoreError> {
    Ok(match kind {
        StoreKind::Indexed => Box::new(LogStore::open(session_dir)?),
        StoreKind::Dir => Box::new(DirStore::open(session_dir)?),
    })
}

/// Detect which store implementation a session on disk uses.
pub fn detect_store_kind(session_dir: &Path) -> StoreKind {
    if session_dir.join("state.db").exists() {
        StoreKind::Indexed
    } else {
        StoreKind::Dir
    }
}

/// Single-writer lock on a session directory, released on drop. A lock
/// left behind by a dead process (crash) is stolen.
pub struct SessionLock {
    path: PathBuf,
}

impl SessionLock {
    pub fn acquire(session_dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(session_dir)?;
        let path = session_dir.join("lock");
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(pid) = text.trim().parse::<u32>() {
                if pid != std::process::id() && Path::new(&format!("/proc/{pid}")).exists() {
                    return Err(StoreError::Locked { pid, path });
                }
            }
        }
        std::fs::write(&path, std::process::id().to_string())?;
        Ok(Self { path })
    }
}

impl Drop for SessionLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Environment variable consulted by [`CrashingStore::wrap_from_env`]:
/// the process exits abruptly once that many store writes have completed.
pub const CRASH_AFTER_WRITES_ENV: &str = "CAMPAIGND_CRASH_AFTER_WRITES";

/// Test hook: simulates a hard process kill at a chosen write boundary.
pub struct CrashingStore {
    inner: Box<dyn Store>,
    remaining: u64,
}

impl CrashingStore {
    /// Wraps `inner` if the crash env var is set; otherwise returns it
    /// unchanged.
    pub fn wrap_from_env(inner: Box<dyn Store>) -> Box<dyn Store> {
        match std::env::var(CRASH_AFTER_WRITES_ENV)
            .ok()
            .and_then(|v| v.parse::<u64>().ok())
        {
            Some(remaining) => Box::new(Self { inner, remaining }),
            None => inner,
        }
    }

    fn maybe_crash(&mut self) {
        if self.remaining == 0 {
            // Abrupt exit, no destructors: the lock file stays behind,
            // exactly like a real kill.
            std::process::exit(42);
        }
        self.remaining -= 1;
    }
}

impl Store for CrashingStore {
    fn save_job(&mut self, job: &Job) -> Result<(), StoreError> {
        self.maybe_crash();
        self.inner.save_job(job)
    }

    fn record_attempt(&mut self, job_id: &str, attempt: &Attempt) -> Result<(), StoreError> {
        self.maybe_crash();
        self.inner.record_attempt(job_id, attempt)
    }

    fn load_all(&mut self) -> Result<LoadOutcome, StoreError> {
        self.inner.load_all()
    }
}

/// Shared upsert rule: attempts are deduped by index, never removed.
pub(crate) fn upsert_attempt(job: &mut Job, attempt: &Attempt) {
    match job.attempts.iter_mut().find(|a| a.index == attempt.index) {
        Some(existing) => *existing = attempt.clone(),
        None => job.attempts.push(attempt.clone()),
    }
    job.attempts.sort_by_key(|a| a.index);
}
