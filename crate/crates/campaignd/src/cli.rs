//! Command-line front-end: launch and resume campaigns, aggregate
//! likelihood-ratio tests, and report per-job wall times.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, LocalBackend, LocalConfig, SimBackend, SimConfig};
use crate::clock::{Clock, SimClock, WallClock};
use crate::engine::Engine;
use crate::model::{Credential, EngineConfig, JobState, DEFAULT_LRT_THRESHOLD, DEFAULT_RTE};
use crate::report::{lrt_csv, CampaignReport};
use crate::scanner::scan;
use crate::store::{
    detect_store_kind, open_store, CrashingStore, SessionLock, StoreKind,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INCOMPLETE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Minimum polling interval against a real (non-simulated) back-end, to
/// avoid hammering remote information systems.
pub const MIN_POLL_SECONDS: u64 = 60;

#[derive(Parser)]
#[command(
    name = "campaignd",
    version,
    about = "Fault-tolerant campaign runner for paired H0/H1 likelihood jobs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Discover input bundles and run the campaign to completion.
    Run(RunArgs),
    /// Continue an interrupted campaign from its session directory.
    Resume(ResumeArgs),
    /// Print a summary and per-job CSV for a session.
    Report(ReportArgs),
    /// Emit the likelihood-ratio test table for completed jobs.
    Lrt(LrtArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Deterministic simulated grid (default).
    Sim,
    /// Run jobs as local worker processes.
    Local,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Directory scanned recursively for paired H0/H1 control files.
    #[arg(short = 'i', long = "input-dir")]
    pub input_dir: PathBuf,

    /// Directory that receives validated outputs, one subdirectory per bundle.
    #[arg(short = 'o', long = "output-dir")]
    pub output_dir: PathBuf,

    /// Maximum number of simultaneously live (submitted or running) jobs.
    #[arg(short = 'J', long = "max-live", default_value_t = 50)]
    pub max_live: u32,

    /// Per-attempt wall-time limit in seconds.
    #[arg(short = 'w', long = "wall-limit", default_value_t = 8 * 3600)]
    pub wall_limit: u64,

    /// Seconds between control-loop passes.
    #[arg(short = 'p', long = "poll-interval", default_value_t = MIN_POLL_SECONDS)]
    pub poll_interval: u64,

    /// Ship this worker executable with every job, lifting the requirement
    /// that sites advertise the runtime environment.
    #[arg(short = 'x', long = "worker")]
    pub worker: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = BackendKind::Sim)]
    pub backend: BackendKind,

    /// TOML description of the simulated grid (sites, faults, durations).
    #[arg(long = "sim-config")]
    pub sim_config: Option<PathBuf>,

    /// Overrides the seed from the simulator configuration.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Session state directory; defaults to <OUTPUT_DIR>/session.
    #[arg(long, env = "CAMPAIGND_SESSION")]
    pub session: Option<PathBuf>,

    #[arg(long = "store", value_enum, default_value_t = StoreArg::Indexed)]
    pub store: StoreArg,

    /// Give up on a job after this many retries (unlimited if absent).
    #[arg(long = "max-retries")]
    pub max_retries: Option<u32>,

    #[arg(long = "lrt-threshold", default_value_t = DEFAULT_LRT_THRESHOLD)]
    pub lrt_threshold: f64,

    /// Worker processes run in parallel by the local back-end.
    #[arg(long, default_value_t = 4)]
    pub parallelism: u32,

    /// Speed factor applied to the wall clock (local back-end); >1 shrinks
    /// every engine sleep, for tests.
    #[arg(long, default_value_t = 1, hide = true)]
    pub clock_speedup: u64,
}

#[derive(Args, Debug)]
pub struct ResumeArgs {
    #[arg(long, env = "CAMPAIGND_SESSION")]
    pub session: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long, env = "CAMPAIGND_SESSION")]
    pub session: PathBuf,

    /// Write the per-job CSV here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LrtArgs {
    #[arg(long, env = "CAMPAIGND_SESSION")]
    pub session: PathBuf,

    #[arg(long, default_value_t = DEFAULT_LRT_THRESHOLD)]
    pub threshold: f64,

    /// Write the LRT CSV here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Everything a `resume` needs, persisted inside the session directory so
/// the original command line is not required again.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionConfig {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub engine: EngineConfig,
    pub backend: BackendKind,
    /// Resolved simulator configuration (inline, so the original TOML file
    /// may disappear without breaking resume).
    pub sim: Option<SimConfig>,
    pub store: StoreKind,
    pub worker: Option<PathBuf>,
    pub parallelism: u32,
    pub clock_speedup: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StoreArg {
    Indexed,
    Dir,
}

impl From<StoreArg> for StoreKind {
    fn from(v: StoreArg) -> Self {
        match v {
            StoreArg::Indexed => StoreKind::Indexed,
            StoreArg::Dir => StoreKind::Dir,
        }
    }
}

const SESSION_CONFIG_FILE: &str = "config.json";

fn usage_error(msg: &str) -> i32 {
    eprintln!("error: {msg}");
    EXIT_USAGE
}

fn save_session_config(session_dir: &Path, cfg: &SessionConfig) -> std::io::Result<()> {
    std::fs::create_dir_all(session_dir)?;
    let data = serde_json::to_vec_pretty(cfg).expect("session config serializes");
    std::fs::write(session_dir.join(SESSION_CONFIG_FILE), data)
}

fn load_session_config(session_dir: &Path) -> Result<SessionConfig, String> {
    let path = session_dir.join(SESSION_CONFIG_FILE);
    let data = std::fs::read(&path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_slice(&data).map_err(|e| format!("bad session config: {e}"))
}

/// Assemble clock, back-end, store, and credential for a session.
fn build_engine(cfg: &SessionConfig, session_dir: &Path) -> Result<Engine, String> {
    let clock: Arc<dyn Clock> = match cfg.backend {
        BackendKind::Sim => SimClock::new(),
        BackendKind::Local => WallClock::with_speedup(cfg.clock_speedup),
    };
    let credential;
    let backend: Box<dyn Backend> = match cfg.backend {
        BackendKind::Sim => {
            let sim = cfg.sim.clone().ok_or("simulator configuration missing")?;
            credential = sim
                .credential
                .as_ref()
                .map_or_else(Credential::everlasting, |c| c.to_credential());
            Box::new(
                SimBackend::new(
                    sim,
                    Arc::clone(&clock),
                    &cfg.engine.required_rte,
                    cfg.engine.ship_executable.is_some(),
                )
                .map_err(|e| e.to_string())?,
            )
        }
        BackendKind::Local => {
            credential = Credential::everlasting();
            let worker_path = cfg
                .worker
                .clone()
                .ok_or("local back-end requires -x/--worker")?;
            Box::new(
                LocalBackend::new(
                    LocalConfig {
                        parallelism: cfg.parallelism,
                        worker_path,
                        rte: cfg.engine.required_rte.clone(),
                        sandbox_root: session_dir.join("sandboxes"),
                    },
                    Arc::clone(&clock),
                )
                .map_err(|e| e.to_string())?,
            )
        }
    };
    let store = open_store(session_dir, cfg.store).map_err(|e| e.to_string())?;
    let store = CrashingStore::wrap_from_env(store);
    Ok(Engine::new(
        cfg.engine.clone(),
        credential,
        clock,
        backend,
        store,
        session_dir.to_path_buf(),
    ))
}

fn finish(engine: &Engine, cfg: &SessionConfig) -> i32 {
    let report = engine.report();
    print!("{}", report.summary_text());
    let _ = std::fs::create_dir_all(&cfg.output_dir);
    let _ = std::fs::write(cfg.output_dir.join("report.csv"), report.per_job_csv());
    if let Ok(csv) = lrt_csv(&engine.session, cfg.engine.lrt_threshold) {
        let _ = std::fs::write(cfg.output_dir.join("lrt.csv"), csv);
    }
    let incomplete: Vec<_> = engine
        .session
        .jobs
        .values()
        .filter(|j| j.state != JobState::Done)
        .collect();
    if incomplete.is_empty() {
        EXIT_OK
    } else {
        for job in &incomplete {
            let reason = job
                .current_attempt()
                .map_or_else(|| "never submitted".to_string(), |a| {
                    format!(
                        "last attempt {} at {} reported {:?}, validation {:?}",
                        a.index, a.site_id, a.reported_status, a.validation
                    )
                });
            eprintln!("incomplete: {} [{}]: {reason}", job.id, job.state);
        }
        EXIT_INCOMPLETE
    }
}

pub fn cmd_run(args: RunArgs) -> i32 {
    if args.backend != BackendKind::Sim && args.poll_interval < MIN_POLL_SECONDS {
        return usage_error(&format!(
            "polling interval below {MIN_POLL_SECONDS}s is not allowed on real back-ends"
        ));
    }
    if args.max_live == 0 {
        return usage_error("-J/--max-live must be at least 1");
    }

    let sim = match (args.backend, &args.sim_config) {
        (BackendKind::Sim, Some(path)) => match SimConfig::load(path) {
            Ok(mut sim) => {
                if let Some(seed) = args.seed {
                    sim.seed = seed;
                }
                Some(sim)
            }
            Err(e) => return usage_error(&e.to_string()),
        },
        (BackendKind::Sim, None) => {
            return usage_error("--backend sim requires --sim-config");
        }
        (BackendKind::Local, _) => None,
    };

    let bundles = match scan(&args.input_dir) {
        Ok(b) => b,
        Err(e) => return usage_error(&e.to_string()),
    };
    if bundles.is_empty() {
        return usage_error(&format!(
            "no control-file pairs found under {}",
            args.input_dir.display()
        ));
    }

    let session_dir = args
        .session
        .clone()
        .unwrap_or_else(|| args.output_dir.join("session"));
    if session_dir.join(SESSION_CONFIG_FILE).exists() {
        return usage_error(&format!(
            "session {} already exists; use `campaignd resume --session {}`",
            session_dir.display(),
            session_dir.display()
        ));
    }

    let cfg = SessionConfig {
        input_dir: args.input_dir.clone(),
        output_dir: args.output_dir.clone(),
        engine: EngineConfig {
            max_live: args.max_live,
            wall_limit: args.wall_limit,
            poll_interval: args.poll_interval,
            max_retries: args.max_retries,
            required_rte: DEFAULT_RTE.to_string(),
            ship_executable: args.worker.clone(),
            lrt_threshold: args.lrt_threshold,
            ..EngineConfig::default()
        },
        backend: args.backend,
        sim,
        store: args.store.into(),
        worker: args.worker.clone(),
        parallelism: args.parallelism,
        clock_speedup: args.clock_speedup,
    };
    if let Err(e) = save_session_config(&session_dir, &cfg) {
        return usage_error(&format!("cannot initialize session: {e}"));
    }

    let _lock = match SessionLock::acquire(&session_dir) {
        Ok(l) => l,
        Err(e) => return usage_error(&e.to_string()),
    };
    let mut engine = match build_engine(&cfg, &session_dir) {
        Ok(e) => e,
        Err(msg) => return usage_error(&msg),
    };
    if let Err(e) = engine.init_campaign(bundles, &cfg.output_dir) {
        eprintln!("error: {e}");
        return EXIT_INCOMPLETE;
    }
    if let Err(e) = engine.run_campaign() {
        eprintln!("error: {e}");
        return EXIT_INCOMPLETE;
    }
    finish(&engine, &cfg)
}

pub fn cmd_resume(args: ResumeArgs) -> i32 {
    if !args.session.is_dir() {
        return usage_error(&format!(
            "session directory {} does not exist",
            args.session.display()
        ));
    }
    let cfg = match load_session_config(&args.session) {
        Ok(c) => c,
        Err(msg) => return usage_error(&msg),
    };
    let _lock = match SessionLock::acquire(&args.session) {
        Ok(l) => l,
        Err(e) => return usage_error(&e.to_string()),
    };
    let mut engine = match build_engine(&cfg, &args.session) {
        Ok(e) => e,
        Err(msg) => return usage_error(&msg),
    };
    match engine.load_existing() {
        Ok(corrupt) => {
            for c in corrupt {
                eprintln!("warning: corrupt record for {}: {}", c.job_id, c.detail);
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INCOMPLETE;
        }
    }
    // A crash during initialization may have persisted only part of the
    // campaign; re-discover the inputs and add what is missing.
    match scan(&cfg.input_dir) {
        Ok(bundles) => {
            if let Err(e) = engine.reconcile(bundles, &cfg.output_dir) {
                eprintln!("error: {e}");
                return EXIT_INCOMPLETE;
            }
        }
        Err(e) => eprintln!(
            "warning: cannot re-scan {}: {e}; resuming with recorded jobs only",
            cfg.input_dir.display()
        ),
    }
    if !engine.session.is_terminal() {
        if let Err(e) = engine.run_campaign() {
            eprintln!("error: {e}");
            return EXIT_INCOMPLETE;
        }
    }
    finish(&engine, &cfg)
}

/// Open a session read-mostly (lock held; a torn log tail may be repaired).
fn open_session(session: &Path) -> Result<(SessionLock, crate::model::Session), String> {
    if !session.is_dir() {
        return Err(format!("session directory {} does not exist", session.display()));
    }
    let lock = SessionLock::acquire(session).map_err(|e| e.to_string())?;
    let mut store =
        open_store(session, detect_store_kind(session)).map_err(|e| e.to_string())?;
    let outcome = store.load_all().map_err(|e| e.to_string())?;
    for c in &outcome.corrupt {
        eprintln!("warning: corrupt record for {}: {}", c.job_id, c.detail);
    }
    let mut session_state = crate::model::Session::default();
    for job in outcome.jobs {
        session_state.jobs.insert(job.id.clone(), job);
    }
    session_state.recount();
    Ok((lock, session_state))
}

pub fn cmd_report(args: ReportArgs) -> i32 {
    let (_lock, session) = match open_session(&args.session) {
        Ok(v) => v,
        Err(msg) => return usage_error(&msg),
    };
    // Campaign duration as observed from the records themselves.
    let total_wall = session
        .jobs
        .values()
        .flat_map(|j| j.attempts.iter())
        .filter_map(|a| a.ended_at)
        .max()
        .unwrap_or(0);
    let report = CampaignReport::from_session(&session, total_wall);
    print!("{}", report.summary_text());
    let csv = report.per_job_csv();
    match &args.csv {
        Some(path) => {
            if let Err(e) = std::fs::write(path, csv) {
                eprintln!("error: cannot write {}: {e}", path.display());
                return EXIT_INCOMPLETE;
            }
        }
        None => print!("{csv}"),
    }
    EXIT_OK
}

pub fn cmd_lrt(args: LrtArgs) -> i32 {
    let (_lock, session) = match open_session(&args.session) {
        Ok(v) => v,
        Err(msg) => return usage_error(&msg),
    };
    if !session.jobs.values().any(|j| j.state == JobState::Done) {
        eprintln!("error: no completed jobs in session");
        return EXIT_INCOMPLETE;
    }
    let csv = match lrt_csv(&session, args.threshold) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INCOMPLETE;
        }
    };
    match &args.csv {
        Some(path) => {
            if let Err(e) = std::fs::write(path, csv) {
                eprintln!("error: cannot write {}: {e}", path.display());
                return EXIT_INCOMPLETE;
            }
        }
        None => print!("{csv}"),
    }
    EXIT_OK
}

pub fn dispatch(cli: Cli) -> i32 {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Resume(args) => cmd_resume(args),
        Command::Report(args) => cmd_report(args),
        Command::Lrt(args) => cmd_lrt(args),
    }
}
