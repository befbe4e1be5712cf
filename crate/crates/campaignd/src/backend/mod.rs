//! Pluggable execution back-ends behind one contract: a deterministic
//! discrete-event simulated grid with fault injection, and a local-process
//! executor that really runs the worker.

mod local;
mod sim;

pub use local::{LocalBackend, LocalConfig};
pub use sim::{FaultKind, FaultRecord, SimBackend, SimTraceEntry};

use std::any::Any;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::model::{Credential, Job};

/// A simulated (or synthetic local) execution site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub site_id: String,
    pub cores: u32,
    /// Run-time-environment tags advertised by the site.
    pub rtes: Vec<String>,
    /// Seconds between acceptance of a submission and queue entry.
    #[serde(default)]
    pub queue_delay: u64,
    /// Seconds the information system lags behind the true job state.
    #[serde(default = "default_info_lag")]
    pub info_lag: u64,
    /// Non-overlapping, sorted `[start, end)` virtual downtime intervals.
    #[serde(default)]
    pub downtime_windows: Vec<(Timestamp, Timestamp)>,
    /// Loss-probability multiplier; > 1 models flaky desktop-grid sites.
    #[serde(default = "default_multiplier")]
    pub lost_multiplier: f64,
}

fn default_info_lag() -> u64 {
    60
}

fn default_multiplier() -> f64 {
    1.0
}

impl SiteSpec {
    pub fn in_downtime(&self, now: Timestamp) -> bool {
        self.downtime_windows.iter().any(|&(s, e)| now >= s && now < e)
    }

    pub fn has_rte(&self, rte: &str) -> bool {
        self.rtes.iter().any(|r| r == rte)
    }
}

/// Injected-fault schedule. Every outcome is drawn from a generator seeded
/// solely by (seed, job_id, attempt_index) so replay is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FaultPlan {
    /// Outputs complete but the middleware reports FAILED.
    #[serde(default)]
    pub p_spurious_fail: f64,
    /// Job vanishes: never reaches a terminal remote status.
    #[serde(default)]
    pub p_lost: f64,
    /// Job dies mid-run; outputs incomplete.
    #[serde(default)]
    pub p_node_crash: f64,
    /// First fetch of an affected attempt fails; the engine retries it.
    #[serde(default)]
    pub p_transfer_fail: f64,
    /// Pinned durations for specific attempts (wall-limit testing).
    #[serde(default)]
    pub duration_overrides: Vec<DurationOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationOverride {
    pub job_id: String,
    pub attempt_index: u32,
    pub minutes: f64,
}

/// Execution-time model, deterministic per (seed, job_id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationModel {
    pub base_minutes: f64,
    /// Relative spread: durations are uniform in base * [1-spread, 1+spread].
    pub spread: f64,
}

impl Default for DurationModel {
    fn default() -> Self {
        Self {
            base_minutes: 25.0,
            spread: 0.3,
        }
    }
}

/// Full simulator configuration as read from `--sim-config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: u64,
    pub sites: Vec<SiteSpec>,
    #[serde(default)]
    pub fault_plan: FaultPlan,
    #[serde(default)]
    pub duration_model: DurationModel,
    #[serde(default)]
    pub credential: Option<CredentialConfig>,
}

/// Credential behavior for simulated campaigns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredentialConfig {
    /// Seconds of validity at campaign start.
    pub initial_valid_secs: u64,
    /// Seconds of validity granted by each renewal.
    pub lifetime_secs: u64,
    /// Virtual intervals during which the renewal service is down.
    #[serde(default)]
    pub outage_windows: Vec<(Timestamp, Timestamp)>,
}

impl CredentialConfig {
    pub fn to_credential(&self) -> Credential {
        Credential {
            valid_until: self.initial_valid_secs,
            renewable: true,
            lifetime: self.lifetime_secs,
            outage_windows: self.outage_windows.clone(),
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, BackendError> {
        let cfg: SimConfig =
            toml::from_str(text).map_err(|e| BackendError::ConfigInvalid(e.to_string()))?;
        if cfg.sites.is_empty() {
            return Err(BackendError::ConfigMissing);
        }
        for site in &cfg.sites {
            let mut prev_end = 0;
            for &(s, e) in &site.downtime_windows {
                if s >= e || s < prev_end {
                    return Err(BackendError::ConfigInvalid(format!(
                        "site {}: downtime windows must be sorted and non-overlapping",
                        site.site_id
                    )));
                }
                prev_end = e;
            }
        }
        for p in [
            cfg.fault_plan.p_spurious_fail,
            cfg.fault_plan.p_lost,
            cfg.fault_plan.p_node_crash,
            cfg.fault_plan.p_transfer_fail,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(BackendError::ConfigInvalid(
                    "fault probabilities must be in [0, 1]".into(),
                ));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// Client-visible job status; `as_of` lags the true state by the site's
/// information-system delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteStatus {
    pub value: RemoteState,
    pub as_of: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RemoteState {
    Queued,
    Running,
    FinishedOk,
    FinishedFailed,
    Unknown,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("back-end has no configured sites")]
    ConfigMissing,
    #[error("invalid back-end configuration: {0}")]
    ConfigInvalid(String),
    #[error("credential expired")]
    CredentialExpired,
    #[error("site {0} is in downtime")]
    SiteDown(String),
    #[error("site {0} does not advertise the required RTE")]
    RteMissing(String),
    #[error("unknown site {0}")]
    UnknownSite(String),
    #[error("unknown remote id {0}")]
    UnknownRemoteId(String),
    #[error("remote job {0} has not finished")]
    NotFinished(String),
    #[error("transfer failed for {0} (transient)")]
    TransferFailed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// The contract every back-end implements. All calls are made from the
/// engine's single control loop.
pub trait Backend {
    /// Stable, ordered site list.
    fn list_sites(&self) -> Result<Vec<SiteSpec>, BackendError>;

    /// Hand one job (both hypotheses) to a site; returns the remote id.
    fn submit(
        &mut self,
        job: &Job,
        site_id: &str,
        credential: &Credential,
    ) -> Result<String, BackendError>;

    fn poll(&mut self, remote_id: &str) -> Result<RemoteStatus, BackendError>;

    /// Copy the attempt sandbox into `dest`; returns (path, size) pairs.
    fn fetch_outputs(
        &mut self,
        remote_id: &str,
        dest: &Path,
    ) -> Result<Vec<(PathBuf, u64)>, BackendError>;

    /// Free the job; idempotent on already-terminal attempts.
    fn cancel(&mut self, remote_id: &str) -> Result<(), BackendError>;

    /// Whether time is virtual (poll-interval floor does not apply).
    fn is_simulated(&self) -> bool;

    fn as_any(&self) -> &dyn Any;
}

pub(crate) fn copy_dir_files(src: &Path, dest: &Path) -> std::io::Result<Vec<(PathBuf, u64)>> {
    std::fs::create_dir_all(dest)?;
    let mut entries: Vec<_> = std::fs::read_dir(src)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        if entry.file_type()?.is_file() {
            std::fs::copy(entry.path(), dest.join(entry.file_name()))?;
        }
    }
    list_dir_files(dest)
}

/// Sorted (path, size) manifest of the plain files in a directory.
pub(crate) fn list_dir_files(dir: &Path) -> std::io::Result<Vec<(PathBuf, u64)>> {
    let mut manifest = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        if entry.file_type()?.is_file() {
            let len = entry.metadata()?.len();
            manifest.push((entry.path(), len));
        }
    }
    Ok(manifest)
}
