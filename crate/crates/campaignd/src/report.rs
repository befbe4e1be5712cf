//! End-of-campaign aggregation: per-job summaries, per-site attempt
//! counts, and the likelihood-ratio test table, with byte-deterministic
//! CSV renderings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Job, JobState, Session};
use crate::worker::lrt;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("job {0} has no likelihood values (state {1})")]
    MissingLikelihoods(String, JobState),
    #[error("job {job_id}: {source}")]
    Lrt {
        job_id: String,
        source: crate::worker::WorkerError,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: String,
    pub attempts: u32,
    /// Site of the attempt whose outputs were kept (or of the last
    /// attempt, for unfinished jobs); `-` if never submitted.
    pub final_site: String,
    /// Observed running time of the kept attempt in seconds.
    pub wall_seconds: u64,
    pub state: JobState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignReport {
    pub total_wall: u64,
    pub jobs_total: u64,
    pub done: u64,
    pub failed: u64,
    pub retries: u64,
    pub corrected_errors: u64,
    pub per_site_counts: BTreeMap<String, u64>,
    pub per_job: Vec<JobSummary>,
}

fn summarize(job: &Job) -> JobSummary {
    let kept = job
        .kept_attempt
        .and_then(|k| job.attempts.iter().find(|a| a.index == k))
        .or_else(|| job.attempts.last());
    let final_site = kept.map_or_else(|| "-".to_string(), |a| a.site_id.clone());
    let wall_seconds = kept
        .and_then(|a| Some(a.ended_at?.saturating_sub(a.started_at?)))
        .unwrap_or(0);
    JobSummary {
        job_id: job.id.clone(),
        attempts: job.attempts.len() as u32,
        final_site,
        wall_seconds,
        state: job.state,
    }
}

impl CampaignReport {
    pub fn from_session(session: &Session, total_wall: u64) -> Self {
        let jobs_total = session.jobs.len() as u64;
        let done = session
            .jobs
            .values()
            .filter(|j| j.state == JobState::Done)
            .count() as u64;
        let mut per_site_counts: BTreeMap<String, u64> = BTreeMap::new();
        for job in session.jobs.values() {
            for attempt in &job.attempts {
                *per_site_counts.entry(attempt.site_id.clone()).or_insert(0) += 1;
            }
        }
        CampaignReport {
            total_wall,
            jobs_total,
            done,
            failed: jobs_total - done,
            retries: session.counters.retries,
            corrected_errors: session.counters.corrected_errors,
            per_site_counts,
            per_job: session.jobs.values().map(summarize).collect(),
        }
    }

    /// Human-readable run summary printed at campaign end.
    pub fn summary_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "jobs: {} total, {} done, {} failed", self.jobs_total, self.done, self.failed).unwrap();
        writeln!(out, "retries: {}", self.retries).unwrap();
        writeln!(out, "corrected errors: {}", self.corrected_errors).unwrap();
        writeln!(out, "total wall: {}s", self.total_wall).unwrap();
        for (site, n) in &self.per_site_counts {
            writeln!(out, "site {site}: {n} attempts").unwrap();
        }
        out
    }

    /// Per-job CSV; deterministic given the same session contents.
    pub fn per_job_csv(&self) -> String {
        let mut out = String::from("job_id,attempts,final_site,wall_seconds,state\n");
        for j in &self.per_job {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                j.job_id, j.attempts, j.final_site, j.wall_seconds, j.state
            ));
        }
        out
    }
}

/// Likelihood-ratio test table over completed jobs, sorted by bundle name.
/// Values use six decimal places, matching the worker's output precision.
pub fn lrt_csv(session: &Session, threshold: f64) -> Result<String, ReportError> {
    let mut out = String::from("bundle,lnL0,lnL1,lrt,significant\n");
    for job in session.jobs.values() {
        if job.state != JobState::Done {
            continue;
        }
        let (lnl0, lnl1) = match (job.lnl0, job.lnl1) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(ReportError::MissingLikelihoods(job.id.clone(), job.state)),
        };
        let (stat, significant) = lrt(lnl0, lnl1, threshold).map_err(|source| ReportError::Lrt {
            job_id: job.id.clone(),
            source,
        })?;
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            job.bundle.name, lnl0, lnl1, stat, significant
        ));
    }
    Ok(out)
}
