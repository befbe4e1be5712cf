//! The orchestration control loop: submit up to the live cap, poll, fetch,
//! validate, correct statuses, retry at different sites, enforce wall
//! limits, manage credentials, and drive the campaign to completion.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::backend::{Backend, BackendError, RemoteState, SiteSpec};
use crate::clock::{Clock, Timestamp};
use crate::model::{
    advance, Attempt, Credential, EngineConfig, InputBundle, Job, JobEvent, JobState, ModelError,
    ReportedStatus, Session, ValidationOutcome,
};
use crate::report::CampaignReport;
use crate::store::{CorruptRecord, Store, StoreError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("empty campaign: no input bundles discovered")]
    EmptyCampaign,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("fatal store failure: {0}")]
    Store(#[from] StoreError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("campaign did not terminate within {0} ticks")]
    TickBudgetExceeded(u64),
}

/// Everything the acceptance checks need to audit a run.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Submitted {
        time: Timestamp,
        job_id: String,
        attempt_index: u32,
        site_id: String,
        /// Site of the previous failed attempt, for retried jobs.
        prev_failed_site: Option<String>,
        /// Sites that were eligible when this submission was planned.
        eligible_sites: Vec<String>,
        live_after: u32,
    },
    StateChanged {
        time: Timestamp,
        job_id: String,
        from: JobState,
        to: JobState,
        live_after: u32,
    },
    WallLimitCancelled {
        time: Timestamp,
        job_id: String,
        attempt_index: u32,
    },
    DeclaredLost {
        time: Timestamp,
        job_id: String,
        attempt_index: u32,
    },
    Corrected {
        time: Timestamp,
        job_id: String,
        attempt_index: u32,
    },
    SubmissionsBlocked {
        time: Timestamp,
    },
    CredentialRenewed {
        time: Timestamp,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TickOutcome {
    pub progressed: bool,
    pub terminal: bool,
}

/// Outcome of output validation; not an error, a value.
#[derive(Debug, Clone, PartialEq)]
pub enum Validation {
    Valid { lnl0: f64, lnl1: f64 },
    Invalid(InvalidReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InvalidReason {
    MissingFile(String),
    MissingTag(String),
    UnparseableLnl(String),
    NestingViolated,
}

/// Valid iff both per-hypothesis outfiles exist, each has exactly one
/// parseable `lnL = <float>` line, each ends with a `Time used:` line,
/// and lnL1 >= lnL0.
pub fn validate_outputs(job_dir: &Path, bundle: &InputBundle) -> Validation {
    fn extract(job_dir: &Path, name: &str) -> Result<f64, InvalidReason> {
        let path = job_dir.join(name);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| InvalidReason::MissingFile(name.to_string()))?;
        let mut lnl = None;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("lnL") {
                let rest = rest.trim_start();
                let Some(value) = rest.strip_prefix('=') else {
                    continue;
                };
                match (value.trim().parse::<f64>(), lnl) {
                    (Ok(v), None) => lnl = Some(v),
                    // A second lnL line, or an unparseable one.
                    _ => return Err(InvalidReason::UnparseableLnl(name.to_string())),
                }
            }
        }
        let tagged = text
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .is_some_and(|l| l.starts_with(crate::worker::TERMINAL_TAG));
        if !tagged {
            return Err(InvalidReason::MissingTag(name.to_string()));
        }
        lnl.ok_or_else(|| InvalidReason::UnparseableLnl(name.to_string()))
    }

    let lnl0 = match extract(job_dir, &bundle.h0_outfile) {
        Ok(v) => v,
        Err(r) => return Validation::Invalid(r),
    };
    let lnl1 = match extract(job_dir, &bundle.h1_outfile) {
        Ok(v) => v,
        Err(r) => return Validation::Invalid(r),
    };
    if lnl1 < lnl0 {
        return Validation::Invalid(InvalidReason::NestingViolated);
    }
    Validation::Valid { lnl0, lnl1 }
}

pub struct Engine {
    pub config: EngineConfig,
    pub credential: Credential,
    clock: Arc<dyn Clock>,
    backend: Box<dyn Backend>,
    store: Box<dyn Store>,
    session_dir: PathBuf,
    pub session: Session,
    pub trace: Vec<TraceEvent>,
    started_at: Timestamp,
}

struct PlannedSubmission {
    job_id: String,
    site_id: String,
    prev_failed_site: Option<String>,
    eligible_sites: Vec<String>,
}

impl Engine {
    pub fn new(
        config: EngineConfig,
        credential: Credential,
        clock: Arc<dyn Clock>,
        backend: Box<dyn Backend>,
        store: Box<dyn Store>,
        session_dir: PathBuf,
    ) -> Self {
        let started_at = clock.now();
        Self {
            config,
            credential,
            clock,
            backend,
            store,
            session_dir,
            session: Session::default(),
            trace: Vec::new(),
            started_at,
        }
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn session_dir(&self) -> &Path {
        &self.session_dir
    }

    /// Create one job per bundle and persist the initial records. Retained
    /// outputs land under `output_root/<bundle name>/`.
    pub fn init_campaign(
        &mut self,
        bundles: Vec<InputBundle>,
        output_root: &Path,
    ) -> Result<(), EngineError> {
        if bundles.is_empty() {
            return Err(EngineError::EmptyCampaign);
        }
        self.reconcile(bundles, output_root)
    }

    /// Add jobs for bundles not yet in the session (no-op for known ones).
    /// Used at resume time so a crash during campaign initialization does
    /// not silently shrink the campaign.
    pub fn reconcile(
        &mut self,
        bundles: Vec<InputBundle>,
        output_root: &Path,
    ) -> Result<(), EngineError> {
        for bundle in bundles {
            if self.session.jobs.contains_key(&bundle.name) {
                continue;
            }
            let output_dir = output_root.join(&bundle.name);
            let job = Job::new(bundle, output_dir, self.config.wall_limit);
            self.store.save_job(&job)?;
            self.session.jobs.insert(job.id.clone(), job);
        }
        Ok(())
    }

    /// Rebuild the session from the store, conservatively resetting jobs
    /// found in transient states.
    pub fn load_existing(&mut self) -> Result<Vec<CorruptRecord>, EngineError> {
        let outcome = self.store.load_all()?;
        for mut job in outcome.jobs {
            match job.state {
                JobState::Fetching | JobState::Validating => {
                    // A crash between fetch and validate must re-validate,
                    // never re-run: that is why these states exist.
                    let dir = Self::attempt_dir_for(&self.session_dir, &job);
                    let outputs_present = dir.join(&job.bundle.h0_outfile).exists()
                        && dir.join(&job.bundle.h1_outfile).exists();
                    job.state = if outputs_present {
                        JobState::Validating
                    } else {
                        JobState::FailedRetryable
                    };
                }
                JobState::Submitted | JobState::Running => {
                    let known = job
                        .current_attempt()
                        .is_some_and(|a| a.remote_id.is_some());
                    if !known {
                        if let Some(a) = job.current_attempt_mut() {
                            a.reported_status = Some(ReportedStatus::Lost);
                        }
                        job.state = JobState::FailedRetryable;
                    }
                    // Known remote ids are re-polled on the next tick; a
                    // restarted back-end answers UnknownRemoteId and the
                    // job falls back to retry.
                }
                _ => {}
            }
            self.store.save_job(&job)?;
            self.session.jobs.insert(job.id.clone(), job);
        }
        self.session.recount();
        Ok(outcome.corrupt)
    }

    fn now(&self) -> Timestamp {
        self.clock.now()
    }

    fn attempt_dir_for(session_dir: &Path, job: &Job) -> PathBuf {
        let index = job.attempts.last().map_or(0, |a| a.index);
        session_dir
            .join("jobs")
            .join(&job.id)
            .join(format!("attempt_{index}"))
    }

    fn attempt_dir(&self, job: &Job) -> PathBuf {
        Self::attempt_dir_for(&self.session_dir, job)
    }

    fn transition(&mut self, job: &mut Job, event: JobEvent) -> Result<(), EngineError> {
        let from = job.state;
        job.state = advance(from, event)?;
        // Persist-before-act: the new state is durable before any of its
        // consequences execute.
        self.store.save_job(job)?;
        self.session.jobs.insert(job.id.clone(), job.clone());
        self.trace.push(TraceEvent::StateChanged {
            time: self.now(),
            job_id: job.id.clone(),
            from,
            to: job.state,
            live_after: self.session.live_count(),
        });
        Ok(())
    }

    /// One pass of the control loop. Backend errors are absorbed per job
    /// (the job stays in its state and is retried next tick); store
    /// failures abort the tick.
    pub fn tick(&mut self) -> Result<TickOutcome, EngineError> {
        let now = self.now();
        let before: Vec<JobState> = self.session.jobs.values().map(|j| j.state).collect();

        // (1) Credential: renew if possible; otherwise keep polling but
        // skip submissions this tick.
        let mut can_submit = true;
        if !self.credential.is_valid(now) {
            if self.credential.renewal_available(now) {
                self.credential.renew(now);
                self.trace.push(TraceEvent::CredentialRenewed { time: now });
            } else {
                can_submit = false;
                self.trace.push(TraceEvent::SubmissionsBlocked { time: now });
            }
        }

        let sites = self.backend.list_sites()?;

        // (2)+(3) Poll live jobs and enforce the wall limit.
        let live_ids: Vec<String> = self
            .session
            .jobs
            .values()
            .filter(|j| j.state.is_live())
            .map(|j| j.id.clone())
            .collect();
        for id in live_ids {
            self.poll_one(&id, &sites, now)?;
        }

        // (4)-(6) Fetch finished jobs, then validate and apply the
        // status-override rule.
        let fetching: Vec<String> = self
            .session
            .jobs
            .values()
            .filter(|j| j.state == JobState::Fetching)
            .map(|j| j.id.clone())
            .collect();
        for id in fetching {
            self.fetch_one(&id)?;
        }
        let validating: Vec<String> = self
            .session
            .jobs
            .values()
            .filter(|j| j.state == JobState::Validating)
            .map(|j| j.id.clone())
            .collect();
        for id in validating {
            self.validate_one(&id, now)?;
        }

        // Retry-budget enforcement before planning.
        let retryable: Vec<String> = self
            .session
            .jobs
            .values()
            .filter(|j| j.state == JobState::FailedRetryable)
            .map(|j| j.id.clone())
            .collect();
        if let Some(max_retries) = self.config.max_retries {
            for id in retryable {
                let mut job = self.session.jobs.get(&id).cloned().unwrap();
                if job.attempts.len() as u32 >= max_retries + 1 {
                    self.transition(&mut job, JobEvent::RetriesExhausted)?;
                }
            }
        }

        // (7) Plan and execute submissions.
        if can_submit {
            let plan = self.plan_submissions(&sites, now);
            for planned in plan {
                self.submit_one(planned, now)?;
            }
        }

        let after: Vec<JobState> = self.session.jobs.values().map(|j| j.state).collect();
        Ok(TickOutcome {
            progressed: before != after,
            terminal: self.session.is_terminal(),
        })
    }

    fn site_spec<'a>(sites: &'a [SiteSpec], site_id: &str) -> Option<&'a SiteSpec> {
        sites.iter().find(|s| s.site_id == site_id)
    }

    fn poll_one(
        &mut self,
        id: &str,
        sites: &[SiteSpec],
        now: Timestamp,
    ) -> Result<(), EngineError> {
        let mut job = self.session.jobs.get(id).cloned().unwrap();
        let Some(attempt) = job.current_attempt() else {
            return Ok(());
        };
        let Some(rid) = attempt.remote_id.clone() else {
            return Ok(());
        };
        let attempt_index = attempt.index;
        let submitted_at = attempt.submitted_at;
        let site_id = attempt.site_id.clone();

        let status = match self.backend.poll(&rid) {
            Ok(s) => s,
            Err(BackendError::UnknownRemoteId(_)) => {
                // Back-end restarted since the submission (resume path).
                if let Some(a) = job.current_attempt_mut() {
                    a.reported_status = Some(ReportedStatus::Lost);
                    a.ended_at = Some(now);
                }
                self.trace.push(TraceEvent::DeclaredLost {
                    time: now,
                    job_id: job.id.clone(),
                    attempt_index,
                });
                self.transition(&mut job, JobEvent::MiddlewareFailed)?;
                return Ok(());
            }
            Err(_) => return Ok(()), // absorbed; re-polled next tick
        };

        match status.value {
            RemoteState::Queued => {}
            RemoteState::Unknown => {
                let lost_after = self.config.lost_after.unwrap_or_else(|| {
                    Self::site_spec(sites, &site_id)
                        .map_or(240, |s| 3 * s.info_lag + s.queue_delay)
                });
                if job.state == JobState::Submitted && now.saturating_sub(submitted_at) > lost_after
                {
                    let _ = self.backend.cancel(&rid);
                    if let Some(a) = job.current_attempt_mut() {
                        a.reported_status = Some(ReportedStatus::Lost);
                        a.ended_at = Some(now);
                    }
                    self.trace.push(TraceEvent::DeclaredLost {
                        time: now,
                        job_id: job.id.clone(),
                        attempt_index,
                    });
                    self.transition(&mut job, JobEvent::MiddlewareFailed)?;
                    return Ok(());
                }
            }
            RemoteState::Running => {
                if job.state == JobState::Submitted {
                    if let Some(a) = job.current_attempt_mut() {
                        a.started_at = Some(now); // observed, lag-adjusted
                    }
                    self.transition(&mut job, JobEvent::Started)?;
                }
            }
            RemoteState::FinishedOk | RemoteState::FinishedFailed => {
                if job.state == JobState::Submitted {
                    if let Some(a) = job.current_attempt_mut() {
                        a.started_at = Some(now);
                    }
                    self.transition(&mut job, JobEvent::Started)?;
                }
                let reported = if status.value == RemoteState::FinishedOk {
                    ReportedStatus::Ok
                } else {
                    ReportedStatus::Failed
                };
                if let Some(a) = job.current_attempt_mut() {
                    a.reported_status = Some(reported);
                    a.ended_at = Some(now);
                }
                self.transition(&mut job, JobEvent::Finished)?;
                return Ok(());
            }
        }

        // Wall-limit enforcement on observed running time. The grace
        // added by the information-system lag is accepted.
        if job.state == JobState::Running {
            let started = job.current_attempt().and_then(|a| a.started_at);
            if let Some(started) = started {
                if now.saturating_sub(started) > self.config.wall_limit {
                    let _ = self.backend.cancel(&rid);
                    if let Some(a) = job.current_attempt_mut() {
                        a.reported_status = Some(ReportedStatus::Failed);
                        a.ended_at = Some(now);
                    }
                    self.trace.push(TraceEvent::WallLimitCancelled {
                        time: now,
                        job_id: job.id.clone(),
                        attempt_index,
                    });
                    self.transition(&mut job, JobEvent::MiddlewareFailed)?;
                }
            }
        }

        // Every mutating path above persisted through transition(); a poll
        // that observed no change writes nothing.
        Ok(())
    }

    fn fetch_one(&mut self, id: &str) -> Result<(), EngineError> {
        let mut job = self.session.jobs.get(id).cloned().unwrap();
        let Some(rid) = job.current_attempt().and_then(|a| a.remote_id.clone()) else {
            return Ok(());
        };
        let dest = self.attempt_dir(&job);
        match self.backend.fetch_outputs(&rid, &dest) {
            Ok(_) => self.transition(&mut job, JobEvent::Fetched),
            // Transient (e.g. transfer failure): stays FETCHING, retried
            // next tick.
            Err(_) => Ok(()),
        }
    }

    fn validate_one(&mut self, id: &str, now: Timestamp) -> Result<(), EngineError> {
        let mut job = self.session.jobs.get(id).cloned().unwrap();
        let dir = self.attempt_dir(&job);
        match validate_outputs(&dir, &job.bundle) {
            Validation::Valid { lnl0, lnl1 } => {
                let attempt_index = job.current_attempt().map_or(0, |a| a.index);
                let mut corrected = false;
                if let Some(a) = job.current_attempt_mut() {
                    a.validation = ValidationOutcome::Passed;
                    // Status-override: the middleware said FAILED but all
                    // outputs are present and well-formed.
                    if a.reported_status == Some(ReportedStatus::Failed) && !a.corrected {
                        a.corrected = true;
                        corrected = true;
                    }
                }
                if corrected {
                    self.session.counters.corrected_errors += 1;
                    self.trace.push(TraceEvent::Corrected {
                        time: now,
                        job_id: job.id.clone(),
                        attempt_index,
                    });
                }
                job.lnl0 = Some(lnl0);
                job.lnl1 = Some(lnl1);
                job.kept_attempt = Some(attempt_index);
                // Retain exactly this attempt's outputs. Copy first, then
                // persist DONE: re-validating after a crash in between is
                // idempotent, so no second attempt's outputs are ever kept.
                self.keep_outputs(&job, &dir)?;
                self.session.counters.done += 1;
                self.transition(&mut job, JobEvent::ValidationPassed)
            }
            Validation::Invalid(_) => {
                if let Some(a) = job.current_attempt_mut() {
                    a.validation = ValidationOutcome::Failed;
                }
                self.transition(&mut job, JobEvent::ValidationFailed)
            }
        }
    }

    fn keep_outputs(&self, job: &Job, attempt_dir: &Path) -> Result<(), EngineError> {
        std::fs::create_dir_all(&job.output_dir).map_err(StoreError::IoFailure)?;
        for name in [&job.bundle.h0_outfile, &job.bundle.h1_outfile] {
            std::fs::copy(attempt_dir.join(name), job.output_dir.join(name))
                .map_err(StoreError::IoFailure)?;
        }
        std::fs::write(
            job.output_dir.join("kept_attempt"),
            format!("{}\n", job.kept_attempt.unwrap_or(0)),
        )
        .map_err(StoreError::IoFailure)?;
        Ok(())
    }

    /// Deterministic submission planning: NEW jobs before retries, then by
    /// job id, up to the live cap; eligible sites advertise the required
    /// RTE (or the executable is shipped) and are not in downtime; a retry
    /// avoids its last failed site whenever an alternative exists; ties
    /// on load break in configured site order.
    fn plan_submissions(&self, sites: &[SiteSpec], now: Timestamp) -> Vec<PlannedSubmission> {
        let live = self.session.live_count();
        let capacity = self.config.max_live.saturating_sub(live) as usize;
        if capacity == 0 {
            return Vec::new();
        }

        let mut site_live: Vec<(String, u32)> = sites
            .iter()
            .map(|s| (s.site_id.clone(), 0u32))
            .collect();
        for job in self.session.jobs.values() {
            if job.state.is_live() {
                if let Some(a) = job.current_attempt() {
                    if let Some(entry) = site_live.iter_mut().find(|(id, _)| *id == a.site_id) {
                        entry.1 += 1;
                    }
                }
            }
        }

        let mut candidates: Vec<&Job> = self
            .session
            .jobs
            .values()
            .filter(|j| j.state == JobState::New)
            .collect();
        candidates.extend(
            self.session
                .jobs
                .values()
                .filter(|j| j.state == JobState::FailedRetryable),
        );

        let shipping = self.config.ship_executable.is_some();
        let mut plan = Vec::new();
        for job in candidates.into_iter().take(capacity) {
            let eligible: Vec<&SiteSpec> = sites
                .iter()
                .filter(|s| s.has_rte(&self.config.required_rte) || shipping)
                .filter(|s| !s.in_downtime(now))
                .collect();
            if eligible.is_empty() {
                continue; // NoEligibleSite: stays pending this tick
            }
            let prev_failed_site = if job.state == JobState::FailedRetryable {
                job.current_attempt().map(|a| a.site_id.clone())
            } else {
                None
            };
            let pool: Vec<&SiteSpec> = match &prev_failed_site {
                Some(prev) if eligible.len() >= 2 => eligible
                    .iter()
                    .copied()
                    .filter(|s| &s.site_id != prev)
                    .collect(),
                _ => eligible.clone(),
            };
            let chosen = pool
                .iter()
                .min_by_key(|s| {
                    let load = site_live
                        .iter()
                        .find(|(id, _)| *id == s.site_id)
                        .map_or(0, |(_, n)| *n);
                    let order = sites
                        .iter()
                        .position(|c| c.site_id == s.site_id)
                        .unwrap_or(usize::MAX);
                    (load, order)
                })
                .unwrap();
            if let Some(entry) = site_live.iter_mut().find(|(id, _)| *id == chosen.site_id) {
                entry.1 += 1;
            }
            plan.push(PlannedSubmission {
                job_id: job.id.clone(),
                site_id: chosen.site_id.clone(),
                prev_failed_site,
                eligible_sites: eligible.iter().map(|s| s.site_id.clone()).collect(),
            });
        }
        plan
    }

    fn submit_one(&mut self, planned: PlannedSubmission, now: Timestamp) -> Result<(), EngineError> {
        let mut job = self.session.jobs.get(&planned.job_id).cloned().unwrap();
        let rid = match self
            .backend
            .submit(&job, &planned.site_id, &self.credential)
        {
            Ok(rid) => rid,
            // Non-fatal (site down, credential raced out, ...): the job
            // stays pending and is replanned next tick.
            Err(_) => return Ok(()),
        };
        let index = job.attempts.len() as u32 + 1;
        let attempt = Attempt::new(index, planned.site_id.clone(), rid, now);
        job.attempts.push(attempt);
        self.session.counters.submitted += 1;
        if index > 1 {
            self.session.counters.retries += 1;
        }
        let event = if job.state == JobState::New {
            JobEvent::Submitted
        } else {
            JobEvent::RetryScheduled
        };
        self.transition(&mut job, event)?;
        self.trace.push(TraceEvent::Submitted {
            time: now,
            job_id: planned.job_id,
            attempt_index: index,
            site_id: planned.site_id,
            prev_failed_site: planned.prev_failed_site,
            eligible_sites: planned.eligible_sites,
            live_after: self.session.live_count(),
        });
        Ok(())
    }

    /// Loop ticks every poll interval until every job is terminal.
    pub fn run_campaign(&mut self) -> Result<CampaignReport, EngineError> {
        if self.session.jobs.is_empty() {
            return Err(EngineError::EmptyCampaign);
        }
        let mut ticks: u64 = 0;
        loop {
            let outcome = self.tick()?;
            ticks += 1;
            if outcome.terminal {
                break;
            }
            if ticks >= self.config.max_ticks {
                return Err(EngineError::TickBudgetExceeded(ticks));
            }
            self.clock.sleep(self.config.poll_interval);
        }
        Ok(self.report())
    }

    pub fn report(&self) -> CampaignReport {
        CampaignReport::from_session(&self.session, self.now().saturating_sub(self.started_at))
    }
}
