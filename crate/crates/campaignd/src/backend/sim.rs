//! Deterministic discrete-event grid simulator with fault injection.
//!
//! The virtual clock is owned by the engine; the simulator lazily applies
//! every event with a timestamp at or before the clock's current reading
//! whenever it is called. Fault outcomes and durations are pre-drawn at
//! submit time from a generator seeded solely by (seed, job_id,
//! attempt_index), so identical configurations replay identical traces.
//!
//! Output files are synthesized by invoking the worker's pure functions
//! directly, which guarantees output equivalence with the local back-end.

use std::any::Any;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    list_dir_files, Backend, BackendError, RemoteState, RemoteStatus, SimConfig, SiteSpec,
};
use crate::clock::{Clock, Timestamp};
use crate::model::{Credential, Job};
use crate::scanner::parse_ctl;
use crate::worker;

/// Pre-drawn fate of one attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Ok,
    SpuriousFail,
    Lost,
    NodeCrash,
}

/// What the injector actually did to an attempt, logged at the moment the
/// fault takes effect. This log is the oracle for corrected-error counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub time: Timestamp,
    pub job_id: String,
    pub attempt_index: u32,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultKind {
    /// Outputs complete, middleware reported FAILED.
    SpuriousFail,
    /// Never reached the information system again.
    Lost,
    /// Died mid-run; outputs incomplete.
    NodeCrash,
    /// Killed because its site went into downtime while it ran.
    DowntimeCrash,
    /// One fetch attempt failed before succeeding.
    TransferFail,
}

/// Per-site capacity trace entry, recorded at every start/finish.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimTraceEntry {
    pub time: Timestamp,
    pub site_id: String,
    pub running: u32,
    pub cores: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    EnterQueue(String),
    Finish(String),
    DowntimeStart(usize),
    DowntimeEnd(usize),
}

#[derive(Debug)]
struct SimAttempt {
    job_id: String,
    attempt_index: u32,
    site_idx: usize,
    h0_ctl: PathBuf,
    h1_ctl: PathBuf,
    referenced: Vec<PathBuf>,
    outcome: Outcome,
    duration: u64,
    /// True state transitions (time, state), in order.
    history: Vec<(Timestamp, RemoteState)>,
    terminal: bool,
    complete_outputs: bool,
    transfer_fails_remaining: u32,
}

struct SiteRuntime {
    spec: SiteSpec,
    running: Vec<String>,
    queue: VecDeque<String>,
}

pub struct SimBackend {
    clock: Arc<dyn Clock>,
    sites: Vec<SiteRuntime>,
    config: SimConfig,
    required_rte: String,
    ship_executable: bool,
    attempts: BTreeMap<String, SimAttempt>,
    events: BinaryHeap<Reverse<(Timestamp, u64, EventKind)>>,
    seq: u64,
    processed_until: Timestamp,
    fault_log: Vec<FaultRecord>,
    trace: Vec<SimTraceEntry>,
}

impl SimBackend {
    pub fn new(
        config: SimConfig,
        clock: Arc<dyn Clock>,
        required_rte: &str,
        ship_executable: bool,
    ) -> Result<Self, BackendError> {
        if config.sites.is_empty() {
            return Err(BackendError::ConfigMissing);
        }
        let mut backend = Self {
            clock,
            sites: config
                .sites
                .iter()
                .map(|spec| SiteRuntime {
                    spec: spec.clone(),
                    running: Vec::new(),
                    queue: VecDeque::new(),
                })
                .collect(),
            config,
            required_rte: required_rte.to_string(),
            ship_executable,
            attempts: BTreeMap::new(),
            events: BinaryHeap::new(),
            seq: 0,
            processed_until: 0,
            fault_log: Vec::new(),
            trace: Vec::new(),
        };
        let windows: Vec<(usize, Timestamp, Timestamp)> = backend
            .config
            .sites
            .iter()
            .enumerate()
            .flat_map(|(idx, site)| {
                site.downtime_windows
                    .iter()
                    .map(move |&(start, end)| (idx, start, end))
            })
            .collect();
        for (idx, start, end) in windows {
            backend.push_event(start, EventKind::DowntimeStart(idx));
            backend.push_event(end, EventKind::DowntimeEnd(idx));
        }
        Ok(backend)
    }

    pub fn fault_log(&self) -> &[FaultRecord] {
        &self.fault_log
    }

    pub fn capacity_trace(&self) -> &[SimTraceEntry] {
        &self.trace
    }

    fn push_event(&mut self, time: Timestamp, kind: EventKind) {
        self.events.push(Reverse((time, self.seq, kind)));
        self.seq += 1;
    }

    fn rng_for(&self, job_id: &str, attempt_index: u32, context: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.config.seed.to_le_bytes());
        hasher.update(job_id.as_bytes());
        hasher.update([0xff]);
        hasher.update(attempt_index.to_le_bytes());
        hasher.update(context.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    fn draw_outcome(&self, job_id: &str, attempt_index: u32, site: &SiteSpec) -> Outcome {
        let fp = &self.config.fault_plan;
        let u: f64 = self.rng_for(job_id, attempt_index, "fault").gen();
        let p_lost = (fp.p_lost * site.lost_multiplier).min(1.0);
        if u < fp.p_spurious_fail {
            Outcome::SpuriousFail
        } else if u < fp.p_spurious_fail + p_lost {
            Outcome::Lost
        } else if u < fp.p_spurious_fail + p_lost + fp.p_node_crash {
            Outcome::NodeCrash
        } else {
            Outcome::Ok
        }
    }

    fn draw_duration(&self, job_id: &str, attempt_index: u32) -> u64 {
        for o in &self.config.fault_plan.duration_overrides {
            if o.job_id == job_id && o.attempt_index == attempt_index {
                return (o.minutes * 60.0).max(1.0) as u64;
            }
        }
        let dm = &self.config.duration_model;
        let u: f64 = self.rng_for(job_id, 0, "duration").gen();
        let minutes = dm.base_minutes * (1.0 - dm.spread + 2.0 * dm.spread * u);
        ((minutes * 60.0).max(1.0)) as u64
    }

    /// Apply every event due at or before `now`, in (time, insertion) order.
    fn run_until(&mut self, now: Timestamp) {
        while let Some(Reverse((time, _, _))) = self.events.peek() {
            if *time > now {
                break;
            }
            let Reverse((time, _, kind)) = self.events.pop().unwrap();
            match kind {
                EventKind::EnterQueue(rid) => {
                    let attempt = self.attempts.get_mut(&rid).unwrap();
                    if attempt.terminal {
                        continue;
                    }
                    let site_idx = attempt.site_idx;
                    attempt.history.push((time, RemoteState::Queued));
                    self.sites[site_idx].queue.push_back(rid);
                    self.try_schedule(site_idx, time);
                }
                EventKind::Finish(rid) => {
                    let attempt = self.attempts.get_mut(&rid).unwrap();
                    if attempt.terminal {
                        continue; // cancelled or downtime-crashed earlier
                    }
                    attempt.terminal = true;
                    let site_idx = attempt.site_idx;
                    let (state, fault) = match attempt.outcome {
                        Outcome::Ok => (RemoteState::FinishedOk, None),
                        Outcome::SpuriousFail => {
                            (RemoteState::FinishedFailed, Some(FaultKind::SpuriousFail))
                        }
                        Outcome::NodeCrash => {
                            (RemoteState::FinishedFailed, Some(FaultKind::NodeCrash))
                        }
                        Outcome::Lost => unreachable!("lost attempts schedule no events"),
                    };
                    attempt.complete_outputs = attempt.outcome != Outcome::NodeCrash;
                    attempt.history.push((time, state));
                    if let Some(kind) = fault {
                        self.fault_log.push(FaultRecord {
                            time,
                            job_id: attempt.job_id.clone(),
                            attempt_index: attempt.attempt_index,
                            kind,
                        });
                    }
                    self.sites[site_idx].running.retain(|r| r != &rid);
                    self.record_trace(site_idx, time);
                    self.try_schedule(site_idx, time);
                }
                EventKind::DowntimeStart(site_idx) => {
                    // Jobs running at downtime onset become node crashes.
                    let running: Vec<String> = self.sites[site_idx].running.drain(..).collect();
                    for rid in running {
                        let attempt = self.attempts.get_mut(&rid).unwrap();
                        attempt.terminal = true;
                        attempt.complete_outputs = false;
                        attempt.history.push((time, RemoteState::FinishedFailed));
                        self.fault_log.push(FaultRecord {
                            time,
                            job_id: attempt.job_id.clone(),
                            attempt_index: attempt.attempt_index,
                            kind: FaultKind::DowntimeCrash,
                        });
                    }
                    self.record_trace(site_idx, time);
                }
                EventKind::DowntimeEnd(site_idx) => {
                    self.try_schedule(site_idx, time);
                }
            }
        }
        self.processed_until = now;
    }

    /// FIFO per site: start queued attempts while cores are free and the
    /// site is up.
    fn try_schedule(&mut self, site_idx: usize, time: Timestamp) {
        loop {
            let site = &mut self.sites[site_idx];
            if site.running.len() as u32 >= site.spec.cores
                || site.spec.in_downtime(time)
                || site.queue.is_empty()
            {
                return;
            }
            let rid = site.queue.pop_front().unwrap();
            let attempt = self.attempts.get_mut(&rid).unwrap();
            if attempt.terminal {
                continue;
            }
            attempt.history.push((time, RemoteState::Running));
            let duration = match attempt.outcome {
                // Crashing jobs die partway through.
                Outcome::NodeCrash => (attempt.duration / 2).max(1),
                _ => attempt.duration,
            };
            let finish_at = time + duration;
            self.sites[site_idx].running.push(rid.clone());
            self.push_event(finish_at, EventKind::Finish(rid));
            self.record_trace(site_idx, time);
        }
    }

    fn record_trace(&mut self, site_idx: usize, time: Timestamp) {
        let site = &self.sites[site_idx];
        self.trace.push(SimTraceEntry {
            time,
            site_id: site.spec.site_id.clone(),
            running: site.running.len() as u32,
            cores: site.spec.cores,
        });
    }

    /// Synthesize the attempt sandbox into `dest` by running the worker's
    /// pure task functions on copies of the inputs.
    fn synthesize_outputs(
        attempt: &SimAttempt,
        dest: &Path,
    ) -> Result<(), BackendError> {
        std::fs::create_dir_all(dest)?;
        for src in attempt
            .referenced
            .iter()
            .chain([&attempt.h0_ctl, &attempt.h1_ctl])
        {
            let name = src.file_name().ok_or_else(|| {
                BackendError::ConfigInvalid(format!("bad input path {}", src.display()))
            })?;
            std::fs::copy(src, dest.join(name))?;
        }
        let run = |ctl_path: &Path| -> Result<(), BackendError> {
            let local = dest.join(ctl_path.file_name().unwrap());
            let ctl = parse_ctl(&local)
                .map_err(|e| BackendError::ConfigInvalid(e.to_string()))?;
            worker::run_task(&ctl, dest)
                .map_err(|e| BackendError::ConfigInvalid(e.to_string()))?;
            Ok(())
        };
        run(&attempt.h0_ctl)?;
        if attempt.complete_outputs {
            run(&attempt.h1_ctl)?;
        } else {
            // Crash semantics: the H1 outfile exists but lacks the
            // terminal tag, so validation fails downstream.
            let local = dest.join(attempt.h1_ctl.file_name().unwrap());
            let ctl = parse_ctl(&local)
                .map_err(|e| BackendError::ConfigInvalid(e.to_string()))?;
            let outfile = dest.join(ctl.get("outfile").unwrap_or("out"));
            std::fs::write(&outfile, "model = H1\n")?;
        }
        Ok(())
    }
}

impl Backend for SimBackend {
    fn list_sites(&self) -> Result<Vec<SiteSpec>, BackendError> {
        Ok(self.config.sites.clone())
    }

    fn submit(
        &mut self,
        job: &Job,
        site_id: &str,
        credential: &Credential,
    ) -> Result<String, BackendError> {
        let now = self.clock.now();
        self.run_until(now);
        let site_idx = self
            .sites
            .iter()
            .position(|s| s.spec.site_id == site_id)
            .ok_or_else(|| BackendError::UnknownSite(site_id.to_string()))?;
        let spec = self.sites[site_idx].spec.clone();
        if !credential.is_valid(now) {
            return Err(BackendError::CredentialExpired);
        }
        if !spec.has_rte(&self.required_rte) && !self.ship_executable {
            return Err(BackendError::RteMissing(site_id.to_string()));
        }
        if spec.in_downtime(now) {
            return Err(BackendError::SiteDown(site_id.to_string()));
        }

        let attempt_index = job.attempts.len() as u32 + 1;
        let rid = format!("sim-{}#{attempt_index}", job.id);
        let outcome = self.draw_outcome(&job.id, attempt_index, &spec);
        let duration = self.draw_duration(&job.id, attempt_index);
        let transfer_fails = {
            let u: f64 = self.rng_for(&job.id, attempt_index, "transfer").gen();
            u32::from(u < self.config.fault_plan.p_transfer_fail)
        };
        let attempt = SimAttempt {
            job_id: job.id.clone(),
            attempt_index,
            site_idx,
            h0_ctl: job.bundle.h0_ctl.clone(),
            h1_ctl: job.bundle.h1_ctl.clone(),
            referenced: job.bundle.referenced_files.clone(),
            outcome,
            duration,
            history: Vec::new(),
            terminal: false,
            complete_outputs: false,
            transfer_fails_remaining: transfer_fails,
        };
        if outcome == Outcome::Lost {
            // The job vanishes: it never enters the queue and the
            // information system reports UNKNOWN forever.
            self.fault_log.push(FaultRecord {
                time: now,
                job_id: job.id.clone(),
                attempt_index,
                kind: FaultKind::Lost,
            });
        } else {
            self.push_event(now + spec.queue_delay, EventKind::EnterQueue(rid.clone()));
        }
        self.attempts.insert(rid.clone(), attempt);
        Ok(rid)
    }

    fn poll(&mut self, remote_id: &str) -> Result<RemoteStatus, BackendError> {
        let now = self.clock.now();
        self.run_until(now);
        let attempt = self
            .attempts
            .get(remote_id)
            .ok_or_else(|| BackendError::UnknownRemoteId(remote_id.to_string()))?;
        let info_lag = self.sites[attempt.site_idx].spec.info_lag;
        let as_of = now.saturating_sub(info_lag);
        let value = attempt
            .history
            .iter()
            .rev()
            .find(|&&(t, _)| t <= as_of)
            .map_or(RemoteState::Unknown, |&(_, s)| s);
        Ok(RemoteStatus { value, as_of })
    }

    fn fetch_outputs(
        &mut self,
        remote_id: &str,
        dest: &Path,
    ) -> Result<Vec<(PathBuf, u64)>, BackendError> {
        let now = self.clock.now();
        self.run_until(now);
        let attempt = self
            .attempts
            .get_mut(remote_id)
            .ok_or_else(|| BackendError::UnknownRemoteId(remote_id.to_string()))?;
        if !attempt.terminal {
            return Err(BackendError::NotFinished(remote_id.to_string()));
        }
        if attempt.transfer_fails_remaining > 0 {
            attempt.transfer_fails_remaining -= 1;
            self.fault_log.push(FaultRecord {
                time: now,
                job_id: attempt.job_id.clone(),
                attempt_index: attempt.attempt_index,
                kind: FaultKind::TransferFail,
            });
            return Err(BackendError::TransferFailed(remote_id.to_string()));
        }
        let attempt = self.attempts.get(remote_id).unwrap();
        Self::synthesize_outputs(attempt, dest)?;
        Ok(list_dir_files(dest)?)
    }

    fn cancel(&mut self, remote_id: &str) -> Result<(), BackendError> {
        let now = self.clock.now();
        self.run_until(now);
        let attempt = self
            .attempts
            .get_mut(remote_id)
            .ok_or_else(|| BackendError::UnknownRemoteId(remote_id.to_string()))?;
        if attempt.terminal {
            return Ok(()); // idempotent no-op
        }
        attempt.terminal = true;
        attempt.complete_outputs = false;
        attempt.history.push((now, RemoteState::FinishedFailed));
        let site_idx = attempt.site_idx;
        let rid = remote_id.to_string();
        self.sites[site_idx].queue.retain(|r| r != &rid);
        let was_running = self.sites[site_idx].running.iter().any(|r| r == &rid);
        self.sites[site_idx].running.retain(|r| r != &rid);
        if was_running {
            self.record_trace(site_idx, now);
            self.try_schedule(site_idx, now);
        }
        Ok(())
    }

    fn is_simulated(&self) -> bool {
        true
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
