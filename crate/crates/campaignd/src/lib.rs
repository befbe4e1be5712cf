//! campaignd: a fault-tolerant, back-end-pluggable campaign orchestrator.
//!
//! A campaign is a set of independent jobs, one per paired H0/H1 input
//! bundle discovered on disk. Each job runs both hypotheses on a single
//! execution node, is polled until completion, has its outputs fetched and
//! validated against completion tags, and is resubmitted to a different
//! site on failure until it succeeds. Sessions are persisted so an
//! interrupted campaign resumes without losing or duplicating work.

pub mod backend;
pub mod cli;
pub mod clock;
pub mod engine;
pub mod model;
pub mod report;
pub mod scanner;
pub mod store;
pub mod worker;
