//! Domain types and the job lifecycle state machine shared by all modules.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;

/// The two nested hypotheses of one likelihood-ratio pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hypothesis {
    /// Null model: the selection parameter omega is fixed.
    H0,
    /// Alternative model: omega is free.
    H1,
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hypothesis::H0 => write!(f, "H0"),
            Hypothesis::H1 => write!(f, "H1"),
        }
    }
}

/// One paired H0/H1 task set discovered on disk.
///
/// Both hypotheses of a bundle always execute inside a single job on a
/// single node; a bundle is never split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputBundle {
    /// Path-relative stem, unique within a campaign (e.g. `fam1/ENSGT1`).
    pub name: String,
    /// Directory holding both control files.
    pub dir: PathBuf,
    pub h0_ctl: PathBuf,
    pub h1_ctl: PathBuf,
    /// Output file names (relative to the job sandbox) per hypothesis.
    pub h0_outfile: String,
    pub h1_outfile: String,
    /// Alignment and tree files referenced by the two control files.
    pub referenced_files: Vec<PathBuf>,
}

/// Lifecycle states of a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobState {
    New,
    Submitted,
    Running,
    Fetching,
    Validating,
    Done,
    FailedRetryable,
    FailedPermanent,
}

impl JobState {
    /// "Live" jobs count against the concurrency cap: submitted/scheduled
    /// or running on the remote side.
    pub fn is_live(self) -> bool {
        matches!(self, JobState::Submitted | JobState::Running)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::FailedPermanent)
    }

    pub const ALL: [JobState; 8] = [
        JobState::New,
        JobState::Submitted,
        JobState::Running,
        JobState::Fetching,
        JobState::Validating,
        JobState::Done,
        JobState::FailedRetryable,
        JobState::FailedPermanent,
    ];
}

impl fmt::Display for JobState {
    // SCREAMING_SNAKE form used in reports and CSVs.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            JobState::New => "NEW",
            JobState::Submitted => "SUBMITTED",
            JobState::Running => "RUNNING",
            JobState::Fetching => "FETCHING",
            JobState::Validating => "VALIDATING",
            JobState::Done => "DONE",
            JobState::FailedRetryable => "FAILED_RETRYABLE",
            JobState::FailedPermanent => "FAILED_PERMANENT",
        };
        write!(f, "{s}")
    }
}

/// Events that drive the state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobEvent {
    Submitted,
    Started,
    Finished,
    MiddlewareFailed,
    Fetched,
    ValidationPassed,
    ValidationFailed,
    RetryScheduled,
    RetriesExhausted,
}

impl JobEvent {
    pub const ALL: [JobEvent; 9] = [
        JobEvent::Submitted,
        JobEvent::Started,
        JobEvent::Finished,
        JobEvent::MiddlewareFailed,
        JobEvent::Fetched,
        JobEvent::ValidationPassed,
        JobEvent::ValidationFailed,
        JobEvent::RetryScheduled,
        JobEvent::RetriesExhausted,
    ];
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    /// Signals an engine bug; the campaign must abort with diagnostics.
    #[error("illegal transition: {state:?} on {event:?}")]
    IllegalTransition { state: JobState, event: JobEvent },
}

/// The unique successor of `(state, event)`, or `IllegalTransition`.
///
/// The only loop in the lifecycle runs through `FailedRetryable`; `Done`
/// and `FailedPermanent` are terminal.
pub fn advance(state: JobState, event: JobEvent) -> Result<JobState, ModelError> {
    use JobEvent as E;
    use JobState as S;
    let next = match (state, event) {
        (S::New, E::Submitted) => S::Submitted,
        (S::Submitted, E::Started) => S::Running,
        (S::Submitted, E::MiddlewareFailed) => S::FailedRetryable,
        (S::Running, E::Finished) => S::Fetching,
        (S::Running, E::MiddlewareFailed) => S::FailedRetryable,
        (S::Fetching, E::Fetched) => S::Validating,
        (S::Validating, E::ValidationPassed) => S::Done,
        (S::Validating, E::ValidationFailed) => S::FailedRetryable,
        (S::FailedRetryable, E::RetryScheduled) => S::Submitted,
        (S::FailedRetryable, E::RetriesExhausted) => S::FailedPermanent,
        _ => return Err(ModelError::IllegalTransition { state, event }),
    };
    Ok(next)
}

/// Remote completion status as reported by the middleware, before the
/// validator has had its say.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportedStatus {
    Ok,
    Failed,
    /// The back-end forgot the job (information-system gap); treated as a
    /// middleware failure.
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidationOutcome {
    NotRun,
    Passed,
    Failed,
}

/// One execution attempt of a job at one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    /// 1-based attempt number; the dedupe key together with the job id.
    pub index: u32,
    pub site_id: String,
    pub remote_id: Option<String>,
    pub submitted_at: Timestamp,
    pub started_at: Option<Timestamp>,
    pub ended_at: Option<Timestamp>,
    pub reported_status: Option<ReportedStatus>,
    pub validation: ValidationOutcome,
    /// True iff the middleware reported FAILED but validation passed and
    /// the engine overwrote the status.
    pub corrected: bool,
}

impl Attempt {
    pub fn new(index: u32, site_id: String, remote_id: String, submitted_at: Timestamp) -> Self {
        Self {
            index,
            site_id,
            remote_id: Some(remote_id),
            submitted_at,
            started_at: None,
            ended_at: None,
            reported_status: None,
            validation: ValidationOutcome::NotRun,
            corrected: false,
        }
    }
}

/// The unit of remote execution: one bundle, one state machine, an
/// append-only attempt history across sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub bundle: InputBundle,
    pub state: JobState,
    pub attempts: Vec<Attempt>,
    pub output_dir: PathBuf,
    /// Wall-time limit in seconds for a single attempt.
    pub wall_limit: u64,
    /// Validated log-likelihoods, set once a validation passes.
    pub lnl0: Option<f64>,
    pub lnl1: Option<f64>,
    /// Index of the attempt whose outputs are the retained ones.
    pub kept_attempt: Option<u32>,
}

impl Job {
    pub fn new(bundle: InputBundle, output_dir: PathBuf, wall_limit: u64) -> Self {
        Self {
            id: bundle.name.clone(),
            bundle,
            state: JobState::New,
            attempts: Vec::new(),
            output_dir,
            wall_limit,
            lnl0: None,
            lnl1: None,
            kept_attempt: None,
        }
    }

    pub fn current_attempt(&self) -> Option<&Attempt> {
        self.attempts.last()
    }

    pub fn current_attempt_mut(&mut self) -> Option<&mut Attempt> {
        self.attempts.last_mut()
    }
}

/// Engine-wide configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Cap on concurrently live (submitted or running) jobs.
    pub max_live: u32,
    /// Per-attempt wall-time limit in seconds.
    pub wall_limit: u64,
    /// Seconds between control-loop ticks.
    pub poll_interval: u64,
    /// Retries allowed per job; `None` retries until success.
    pub max_retries: Option<u32>,
    /// Run-time-environment tag a site must advertise.
    pub required_rte: String,
    /// If set, jobs may run on sites lacking the RTE (the executable is
    /// shipped with the job).
    pub ship_executable: Option<PathBuf>,
    pub lrt_threshold: f64,
    /// Seconds an attempt may sit in UNKNOWN before being declared lost;
    /// `None` derives 3 * info_lag + queue_delay from the site.
    pub lost_after: Option<u64>,
    /// Safety valve against a wedged campaign; ticks, not seconds.
    pub max_ticks: u64,
}

pub const DEFAULT_RTE: &str = "APPS/BIO/CODEML";
pub const DEFAULT_LRT_THRESHOLD: f64 = 3.841;

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_live: 50,
            wall_limit: 8 * 3600,
            poll_interval: 60,
            max_retries: None,
            required_rte: DEFAULT_RTE.to_string(),
            ship_executable: None,
            lrt_threshold: DEFAULT_LRT_THRESHOLD,
            lost_after: None,
            max_ticks: 1_000_000,
        }
    }
}

/// Proxy-style credential: submission requires a currently valid one, and
/// renewal only works while the renewal service is up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Credential {
    pub valid_until: Timestamp,
    pub renewable: bool,
    /// Lifetime granted by each renewal, in seconds.
    pub lifetime: u64,
    /// Virtual intervals `[start, end)` during which the renewal service
    /// is unreachable.
    pub outage_windows: Vec<(Timestamp, Timestamp)>,
}

impl Credential {
    /// A credential that never expires (local runs, tests).
    pub fn everlasting() -> Self {
        Self {
            valid_until: Timestamp::MAX,
            renewable: false,
            lifetime: 0,
            outage_windows: Vec::new(),
        }
    }

    pub fn is_valid(&self, now: Timestamp) -> bool {
        now < self.valid_until
    }

    pub fn renewal_available(&self, now: Timestamp) -> bool {
        self.renewable && !self.outage_windows.iter().any(|&(s, e)| now >= s && now < e)
    }

    pub fn renew(&mut self, now: Timestamp) {
        self.valid_until = now.saturating_add(self.lifetime);
    }
}

/// Campaign-wide counters kept in lockstep with the job table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub submitted: u64,
    pub done: u64,
    pub retries: u64,
    pub corrected_errors: u64,
}

/// In-memory view of a campaign: every job plus running counters.
#[derive(Debug, Default)]
pub struct Session {
    pub jobs: BTreeMap<String, Job>,
    pub counters: Counters,
}

impl Session {
    pub fn live_count(&self) -> u32 {
        self.jobs.values().filter(|j| j.state.is_live()).count() as u32
    }

    pub fn is_terminal(&self) -> bool {
        self.jobs.values().all(|j| j.state.is_terminal())
    }

    /// Recompute derived counters from attempt history (used after load).
    pub fn recount(&mut self) {
        let mut c = Counters::default();
        for job in self.jobs.values() {
            c.submitted += job.attempts.len() as u64;
            c.retries += (job.attempts.len() as u64).saturating_sub(1);
            c.corrected_errors += job.attempts.iter().filter(|a| a.corrected).count() as u64;
            if job.state == JobState::Done {
                c.done += 1;
            }
        }
        self.counters = c;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_table_entries() {
        assert_eq!(
            advance(JobState::Running, JobEvent::Finished),
            Ok(JobState::Fetching)
        );
        assert_eq!(
            advance(JobState::Validating, JobEvent::ValidationPassed),
            Ok(JobState::Done)
        );
    }

    #[test]
    fn terminal_states_reject_everything() {
        for event in JobEvent::ALL {
            assert!(advance(JobState::Done, event).is_err());
            assert!(advance(JobState::FailedPermanent, event).is_err());
        }
        assert_eq!(
            advance(JobState::Done, JobEvent::Submitted),
            Err(ModelError::IllegalTransition {
                state: JobState::Done,
                event: JobEvent::Submitted
            })
        );
    }

    /// Every (state, event) pair either maps to exactly one successor or
    /// raises IllegalTransition; never both, and the table is total.
    #[test]
    fn transition_table_is_exhaustive_and_single_valued() {
        let mut legal = 0;
        for state in JobState::ALL {
            for event in JobEvent::ALL {
                match advance(state, event) {
                    Ok(next) => {
                        legal += 1;
                        // Successor is deterministic.
                        assert_eq!(advance(state, event), Ok(next));
                    }
                    Err(ModelError::IllegalTransition { state: s, event: e }) => {
                        assert_eq!((s, e), (state, event));
                    }
                }
            }
        }
        assert_eq!(legal, 10, "transition table size changed unexpectedly");
    }

    /// Any legal event sequence from NEW either stays live/pending or ends
    /// in a terminal state; the only cycle runs through FailedRetryable.
    #[test]
    fn no_cycle_avoids_failed_retryable() {
        // Depth-first walk of the reachable transition graph, tracking the
        // path; any revisit of an on-path state must include FailedRetryable.
        fn walk(state: JobState, path: &mut Vec<JobState>) {
            for event in JobEvent::ALL {
                if let Ok(next) = advance(state, event) {
                    if let Some(pos) = path.iter().position(|&s| s == next) {
                        let cycle = &path[pos..];
                        assert!(
                            cycle.contains(&JobState::FailedRetryable)
                                || next == JobState::FailedRetryable,
                            "cycle avoiding retry found: {cycle:?} -> {next:?}"
                        );
                        continue;
                    }
                    path.push(next);
                    walk(next, path);
                    path.pop();
                }
            }
        }
        let mut path = vec![JobState::New];
        walk(JobState::New, &mut path);
    }

    #[test]
    fn credential_renewal_windows() {
        let mut cred = Credential {
            valid_until: 100,
            renewable: true,
            lifetime: 1000,
            outage_windows: vec![(100, 200)],
        };
        assert!(cred.is_valid(99));
        assert!(!cred.is_valid(100));
        assert!(!cred.renewal_available(150));
        assert!(cred.renewal_available(200));
        cred.renew(200);
        assert!(cred.is_valid(1100));
    }
}
