//! Local-process executor: really runs the worker binary, up to a fixed
//! number of jobs in parallel, each in its own sandbox directory. One
//! synthetic site is advertised.

use std::any::Any;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use crate::backend::{
    copy_dir_files, Backend, BackendError, RemoteState, RemoteStatus, SiteSpec,
};
use crate::clock::Clock;
use crate::model::{Credential, Job};

#[derive(Debug, Clone)]
pub struct LocalConfig {
    pub parallelism: u32,
    /// Path to the worker executable, invoked as `worker <ctl>` with the
    /// sandbox as working directory.
    pub worker_path: PathBuf,
    pub rte: String,
    /// Directory under which per-attempt sandboxes are created.
    pub sandbox_root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LocalState {
    Queued,
    Running,
    FinishedOk,
    FinishedFailed,
}

struct LocalAttempt {
    state: Arc<Mutex<LocalState>>,
    sandbox: PathBuf,
    cancelled: Arc<AtomicBool>,
    child: Arc<Mutex<Option<std::process::Child>>>,
    handle: Option<JoinHandle<()>>,
}

pub struct LocalBackend {
    clock: Arc<dyn Clock>,
    config: LocalConfig,
    /// Free execution slots, guarded for the runner threads.
    slots: Arc<(Mutex<u32>, Condvar)>,
    attempts: BTreeMap<String, LocalAttempt>,
    counter: u64,
}

impl LocalBackend {
    pub fn new(config: LocalConfig, clock: Arc<dyn Clock>) -> Result<Self, BackendError> {
        if config.parallelism == 0 {
            return Err(BackendError::ConfigInvalid("parallelism must be >= 1".into()));
        }
        if !config.worker_path.is_file() {
            return Err(BackendError::ConfigInvalid(format!(
                "worker executable not found: {}",
                config.worker_path.display()
            )));
        }
        let slots = Arc::new((Mutex::new(config.parallelism), Condvar::new()));
        Ok(Self {
            clock,
            config,
            slots,
            attempts: BTreeMap::new(),
            counter: 0,
        })
    }
}

impl Backend for LocalBackend {
    fn list_sites(&self) -> Result<Vec<SiteSpec>, BackendError> {
        Ok(vec![SiteSpec {
            site_id: "local".to_string(),
            cores: self.config.parallelism,
            rtes: vec![self.config.rte.clone()],
            queue_delay: 0,
            info_lag: 0,
            downtime_windows: Vec::new(),
            lost_multiplier: 1.0,
        }])
    }

    fn submit(
        &mut self,
        job: &Job,
        site_id: &str,
        credential: &Credential,
    ) -> Result<String, BackendError> {
        if site_id != "local" {
            return Err(BackendError::UnknownSite(site_id.to_string()));
        }
        if !credential.is_valid(self.clock.now()) {
            return Err(BackendError::CredentialExpired);
        }
        self.counter += 1;
        let rid = format!("local-{}#{}", job.id, self.counter);
        let attempt_index = job.attempts.len() as u32 + 1;
        let sandbox = self
            .config
            .sandbox_root
            .join(&job.id)
            .join(format!("sandbox_{attempt_index}"));
        std::fs::create_dir_all(&sandbox)?;
        for src in job
            .bundle
            .referenced_files
            .iter()
            .chain([&job.bundle.h0_ctl, &job.bundle.h1_ctl])
        {
            let name = src.file_name().ok_or_else(|| {
                BackendError::ConfigInvalid(format!("bad input path {}", src.display()))
            })?;
            std::fs::copy(src, sandbox.join(name))?;
        }

        let state = Arc::new(Mutex::new(LocalState::Queued));
        let cancelled = Arc::new(AtomicBool::new(false));
        let child_slot: Arc<Mutex<Option<std::process::Child>>> = Arc::new(Mutex::new(None));

        let ctls: Vec<PathBuf> = [&job.bundle.h0_ctl, &job.bundle.h1_ctl]
            .iter()
            .map(|p| PathBuf::from(p.file_name().unwrap()))
            .collect();
        let worker = self.config.worker_path.clone();
        let slots = Arc::clone(&self.slots);
        let thread_state = Arc::clone(&state);
        let thread_cancel = Arc::clone(&cancelled);
        let thread_child = Arc::clone(&child_slot);
        let thread_sandbox = sandbox.clone();

        let handle = std::thread::spawn(move || {
            let (lock, cvar) = &*slots;
            {
                let mut free = lock.lock().unwrap();
                while *free == 0 {
                    free = cvar.wait(free).unwrap();
                }
                *free -= 1;
            }
            let result = (|| -> bool {
                if thread_cancel.load(Ordering::SeqCst) {
                    return false;
                }
                *thread_state.lock().unwrap() = LocalState::Running;
                // Both hypotheses run in this one sandbox, sequentially,
                // exactly as they would on one remote node.
                for ctl in &ctls {
                    let spawned = Command::new(&worker)
                        .arg(ctl)
                        .current_dir(&thread_sandbox)
                        .stdout(std::process::Stdio::null())
                        .stderr(std::process::Stdio::null())
                        .spawn();
                    let child = match spawned {
                        Ok(c) => c,
                        Err(_) => return false,
                    };
                    *thread_child.lock().unwrap() = Some(child);
                    // Poll with try_wait so cancel() can grab the lock and
                    // kill the child while we wait.
                    let status = loop {
                        {
                            let mut guard = thread_child.lock().unwrap();
                            match guard.as_mut().unwrap().try_wait() {
                                Ok(Some(s)) => break Ok(s),
                                Ok(None) => {}
                                Err(e) => break Err(e),
                            }
                        }
                        std::thread::sleep(std::time::Duration::from_millis(5));
                    };
                    *thread_child.lock().unwrap() = None;
                    if thread_cancel.load(Ordering::SeqCst) {
                        return false;
                    }
                    match status {
                        Ok(s) if s.success() => {}
                        _ => return false,
                    }
                }
                true
            })();
            *thread_state.lock().unwrap() = if result {
                LocalState::FinishedOk
            } else {
                LocalState::FinishedFailed
            };
            let mut free = lock.lock().unwrap();
            *free += 1;
            cvar.notify_one();
        });

        self.attempts.insert(
            rid.clone(),
            LocalAttempt {
                state,
                sandbox,
                cancelled,
                child: child_slot,
                handle: Some(handle),
            },
        );
        Ok(rid)
    }

    fn poll(&mut self, remote_id: &str) -> Result<RemoteStatus, BackendError> {
        let attempt = self
            .attempts
            .get(remote_id)
            .ok_or_else(|| BackendError::UnknownRemoteId(remote_id.to_string()))?;
        let value = match *attempt.state.lock().unwrap() {
            LocalState::Queued => RemoteState::Queued,
            LocalState::Running => RemoteState::Running,
            LocalState::FinishedOk => RemoteState::FinishedOk,
            LocalState::FinishedFailed => RemoteState::FinishedFailed,
        };
        Ok(RemoteStatus {
            value,
            as_of: self.clock.now(),
        })
    }

    fn fetch_outputs(
        &mut self,
        remote_id: &str,
        dest: &Path,
    ) -> Result<Vec<(PathBuf, u64)>, BackendError> {
        let attempt = self
            .attempts
            .get(remote_id)
            .ok_or_else(|| BackendError::UnknownRemoteId(remote_id.to_string()))?;
        let state = *attempt.state.lock().unwrap();
        if !matches!(state, LocalState::FinishedOk | LocalState::FinishedFailed) {
            return Err(BackendError::NotFinished(remote_id.to_string()));
        }
        Ok(copy_dir_files(&attempt.sandbox, dest)?)
    }

    fn cancel(&mut self, remote_id: &str) -> Result<(), BackendError> {
        let attempt = self
            .attempts
            .get_mut(remote_id)
            .ok_or_else(|| BackendError::UnknownRemoteId(remote_id.to_string()))?;
        let state = *attempt.state.lock().unwrap();
        if matches!(state, LocalState::FinishedOk | LocalState::FinishedFailed) {
            return Ok(()); // idempotent no-op
        }
        attempt.cancelled.store(true, Ordering::SeqCst);
        if let Some(child) = attempt.child.lock().unwrap().as_mut() {
            let _ = child.kill();
        }
        Ok(())
    }

    fn is_simulated(&self) -> bool {
        false
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

impl Drop for LocalBackend {
    fn drop(&mut self) {
        for attempt in self.attempts.values_mut() {
            attempt.cancelled.store(true, Ordering::SeqCst);
            if let Some(child) = attempt.child.lock().unwrap().as_mut() {
                let _ = child.kill();
            }
            if let Some(handle) = attempt.handle.take() {
                let _ = handle.join();
            }
        }
    }
}
