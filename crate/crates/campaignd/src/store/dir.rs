//! Directory-of-records store: one JSON record file per job, written to a
//! temp file and renamed so readers never observe a torn record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use crate::model::{Attempt, Job};
use crate::store::{
    upsert_attempt, CorruptRecord, JobRecord, LoadOutcome, Store, StoreError, SCHEMA_VERSION,
};

pub struct DirStore {
    root: PathBuf,
    /// In-memory mirror so record_attempt can rewrite whole records.
    cache: BTreeMap<String, Job>,
}

const RECORD_FILE: &str = "record.json";

impl DirStore {
    pub fn open(session_dir: &Path) -> Result<Self, StoreError> {
        let root = session_dir.join("jobs");
        std::fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            cache: BTreeMap::new(),
        })
    }

    fn record_path(&self, job_id: &str) -> PathBuf {
        self.root.join(job_id).join(RECORD_FILE)
    }

    fn write_record(&self, job: &Job) -> Result<(), StoreError> {
        let path = self.record_path(&job.id);
        std::fs::create_dir_all(path.parent().unwrap())?;
        let tmp = path.with_extension("json.tmp");
        let data = serde_json::to_vec_pretty(&JobRecord::new(job))?;
        std::fs::write(&tmp, &data)?;
        let file = std::fs::File::open(&tmp)?;
        file.sync_all()?;
        drop(file);
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}

impl Store for DirStore {
    fn save_job(&mut self, job: &Job) -> Result<(), StoreError> {
        self.write_record(job)?;
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
        self.save_job(&job)
    }

    fn load_all(&mut self) -> Result<LoadOutcome, StoreError> {
        let mut outcome = LoadOutcome::default();
        for entry in WalkDir::new(&self.root).sort_by_file_name() {
            let entry = entry.map_err(|e| StoreError::CorruptRecord {
                job_id: String::new(),
                detail: e.to_string(),
            })?;
            if !entry.file_type().is_file() || entry.file_name() != RECORD_FILE {
                continue;
            }
            let job_id = entry
                .path()
                .parent()
                .unwrap()
                .strip_prefix(&self.root)
                .unwrap()
                .to_string_lossy()
                .replace('\\', "/");
            let data = std::fs::read(entry.path())?;
            match serde_json::from_slice::<JobRecord>(&data) {
                Ok(record) if record.schema_version == SCHEMA_VERSION => {
                    outcome.jobs.push(record.job);
                }
                Ok(record) => {
                    return Err(StoreError::SchemaMismatch {
                        found: record.schema_version,
                        expected: SCHEMA_VERSION,
                    })
                }
                Err(e) => {
                    // Quarantine: keep the bytes under a .corrupt name and
                    // report the id; other jobs load normally.
                    let _ = std::fs::rename(
                        entry.path(),
                        entry.path().with_extension("json.corrupt"),
                    );
                    outcome.corrupt.push(CorruptRecord {
                        job_id,
                        detail: e.to_string(),
                    });
                }
            }
        }
        outcome.jobs.sort_by(|a, b| a.id.cmp(&b.id));
        self.cache = outcome
            .jobs
            .iter()
            .map(|j| (j.id.clone(), j.clone()))
            .collect();
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InputBundle, JobState};

    fn job(id: &str) -> Job {
        Job::new(
            InputBundle {
                name: id.to_string(),
                dir: PathBuf::from("/tmp"),
                h0_ctl: PathBuf::from("/tmp/a.H0.ctl"),
                h1_ctl: PathBuf::from("/tmp/a.H1.ctl"),
                h0_outfile: "a.H0.out".into(),
                h1_outfile: "a.H1.out".into(),
                referenced_files: vec![],
            },
            PathBuf::from("/tmp/out"),
            3600,
        )
    }

    #[test]
    fn round_trip_and_last_writer_wins() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = DirStore::open(tmp.path()).unwrap();
        let mut j = job("fam/x");
        store.save_job(&j).unwrap();
        j.state = JobState::Submitted;
        store.save_job(&j).unwrap();
        let loaded = store.load_all().unwrap();
        assert_eq!(loaded.jobs.len(), 1);
        assert_eq!(loaded.jobs[0], j);
        assert!(loaded.corrupt.is_empty());
    }

    #[test]
    fn truncated_record_is_isolated() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = DirStore::open(tmp.path()).unwrap();
        store.save_job(&job("good")).unwrap();
        store.save_job(&job("bad")).unwrap();
        let bad_path = tmp.path().join("jobs/bad/record.json");
        let bytes = std::fs::read(&bad_path).unwrap();
        std::fs::write(&bad_path, &bytes[..bytes.len() / 2]).unwrap();
        let loaded = store.load_all().unwrap();
        assert_eq!(loaded.jobs.len(), 1);
        assert_eq!(loaded.jobs[0].id, "good");
        assert_eq!(loaded.corrupt.len(), 1);
        assert_eq!(loaded.corrupt[0].job_id, "bad");
    }

    #[test]
    fn record_attempt_unknown_job() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = DirStore::open(tmp.path()).unwrap();
        let attempt = Attempt::new(1, "s".into(), "r".into(), 0);
        assert!(matches!(
            store.record_attempt("nope", &attempt),
            Err(StoreError::UnknownJob(_))
        ));
    }

    #[test]
    fn record_attempt_appends_and_dedupes() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = DirStore::open(tmp.path()).unwrap();
        store.save_job(&job("j")).unwrap();
        let a1 = Attempt::new(1, "s1".into(), "r1".into(), 0);
        let mut a2 = Attempt::new(2, "s2".into(), "r2".into(), 10);
        store.record_attempt("j", &a1).unwrap();
        store.record_attempt("j", &a2).unwrap();
        // Replay of attempt 2 with updated fields replaces, not duplicates.
        a2.started_at = Some(20);
        store.record_attempt("j", &a2).unwrap();
        let loaded = store.load_all().unwrap();
        let attempts = &loaded.jobs[0].attempts;
        assert_eq!(attempts.len(), 2);
        assert_eq!(attempts[1].started_at, Some(20));
    }
}
