//! Indexed single-file store: an append-only log of length-prefixed,
//! checksummed JSON frames in `state.db`. The newest frame per job wins;
//! attempt frames are upserts keyed by (job_id, attempt_index). A torn
//! trailing frame (crash during append) is detected by checksum and
//! truncated away; the previous complete record for the job survives.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{Attempt, Job};
use crate::store::{
    upsert_attempt, CorruptRecord, JobRecord, LoadOutcome, Store, StoreError, SCHEMA_VERSION,
};

const JOB_FRAME: u8 = 0x4a; // 'J'
const ATTEMPT_FRAME: u8 = 0x41; // 'A'

#[derive(Serialize, Deserialize)]
struct AttemptFrame {
    schema_version: u32,
    job_id: String,
    attempt: Attempt,
}

pub struct LogStore {
    path: PathBuf,
    file: File,
    cache: BTreeMap<String, Job>,
}

fn fnv1a(data: &[u8]) -> u32 {
    let mut hash: u32 = 0x811c9dc5;
    for &b in data {
        hash ^= b as u32;
        hash = hash.wrapping_mul(0x0100_0193);
    }
    hash
}

impl LogStore {
    pub fn open(session_dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(session_dir)?;
        let path = session_dir.join("state.db");
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)?;
        Ok(Self {
            path,
            file,
            cache: BTreeMap::new(),
        })
    }

    fn append_frame(&mut self, tag: u8, payload: &[u8]) -> Result<(), StoreError> {
        let mut frame = Vec::with_capacity(payload.len() + 9);
        frame.push(tag);
        frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        frame.extend_from_slice(&fnv1a(payload).to_le_bytes());
        frame.extend_from_slice(payload);
        self.file.write_all(&frame)?;
        self.file.sync_data()?;
        Ok(())
    }

    /// Scan the log from the start; returns frames in order and the byte
    /// offset where the first undecodable (torn) frame begins.
    fn scan(path: &Path) -> Result<(Vec<(u8, Vec<u8>)>, u64, bool), StoreError> {
        let mut file = File::open(path)?;
        let mut data = Vec::new();
        file.read_to_end(&mut data)?;
        let mut frames = Vec::new();
        let mut pos = 0usize;
        let mut torn = false;
        while pos < data.len() {
            if pos + 9 > data.len() {
                torn = true;
                break;
            }
            let tag = data[pos];
            let len = u32::from_le_bytes(data[pos + 1..pos + 5].try_into().unwrap()) as usize;
            let sum = u32::from_le_bytes(data[pos + 5..pos + 9].try_into().unwrap());
            let start = pos + 9;
            if start + len > data.len() {
                torn = true;
                break;
            }
            let payload = &data[start..start + len];
            if fnv1a(payload) != sum || !matches!(tag, JOB_FRAME | ATTEMPT_FRAME) {
                torn = true;
                break;
            }
            frames.push((tag, payload.to_vec()));
            pos = start + len;
        }
        Ok((frames, pos as u64, torn))
    }
}

impl Store for LogStore {
    fn save_job(&mut self, job: &Job) -> Result<(), StoreError> {
        let payload = serde_json::to_vec(&JobRecord::new(job))?;
        self.append_frame(JOB_FRAME, &payload)?;
        self.cache.insert(job.id.clone(), job.clone());
        Ok(())
    }

    fn record_attempt(&mut self, job_id: &str, attempt: &Attempt) -> Result<(), StoreError> {
        let mut job = self
            .cache
            .get(job_id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownJob(job_id.to_string()))?;
        upsert_attempt(&mut job, attempt);
        let payload = serde_json::to_vec(&AttemptFrame {
            schema_version: SCHEMA_VERSION,
            job_id: job_id.to_string(),
            attempt: attempt.clone(),
        })?;
        self.append_frame(ATTEMPT_FRAME, &payload)?;
        self.cache.insert(job_id.to_string(), job);
        Ok(())
    }

    fn load_all(&mut self) -> Result<LoadOutcome, StoreError> {
        let (frames, good_len, torn) = Self::scan(&self.path)?;
        if torn {
            // Crash artifact: drop the torn tail so future appends start
            // at a clean frame boundary.
            let f = OpenOptions::new().write(true).open(&self.path)?;
            f.set_len(good_len)?;
            f.sync_data()?;
            self.file.seek(SeekFrom::End(0))?;
        }
        let mut jobs: BTreeMap<String, Job> = BTreeMap::new();
        let mut corrupt: Vec<CorruptRecord> = Vec::new();
        for (tag, payload) in frames {
            match tag {
                JOB_FRAME => match serde_json::from_slice::<JobRecord>(&payload) {
                    Ok(record) if record.schema_version == SCHEMA_VERSION => {
                        jobs.insert(record.job.id.clone(), record.job);
                    }
                    Ok(record) => {
                        return Err(StoreError::SchemaMismatch {
                            found: record.schema_version,
                            expected: SCHEMA_VERSION,
                        })
                    }
                    Err(e) => corrupt.push(CorruptRecord {
                        job_id: String::new(),
                        detail: e.to_string(),
                    }),
                },
                ATTEMPT_FRAME => match serde_json::from_slice::<AttemptFrame>(&payload) {
                    Ok(frame) => {
                        if let Some(job) = jobs.get_mut(&frame.job_id) {
                            upsert_attempt(job, &frame.attempt);
                        }
                    }
                    Err(e) => corrupt.push(CorruptRecord {
                        job_id: String::new(),
                        detail: e.to_string(),
                    }),
                },
                _ => unreachable!("scan filters tags"),
            }
        }
        self.cache = jobs.clone();
        Ok(LoadOutcome {
            jobs: jobs.into_values().collect(),
            corrupt,
        })
    }
}
