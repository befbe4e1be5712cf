//! Shared fixtures for the integration tests: corpus generation and
//! in-process simulated campaign runs.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use campaignd::backend::{
    DurationModel, FaultPlan, FaultRecord, SimBackend, SimConfig, SiteSpec,
};
use campaignd::clock::{Clock, SimClock};
use campaignd::engine::{Engine, TraceEvent};
use campaignd::model::{Counters, Credential, EngineConfig, Job, DEFAULT_RTE};
use campaignd::report::CampaignReport;
use campaignd::scanner::scan;
use campaignd::store::{open_store, StoreKind};

/// Codon column patterns with 1, 2, and 3 distinct codons across the
/// three taxa, so different bundles get different likelihoods.
const CODON_PATTERNS: [[&str; 3]; 3] = [
    ["AAA", "AAA", "AAA"],
    ["AAA", "AAA", "AAC"],
    ["AAA", "AAC", "AAT"],
];

/// Write one paired H0/H1 bundle; `variant` selects the alignment.
pub fn write_bundle(dir: &Path, stem: &str, variant: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let c1 = CODON_PATTERNS[variant % 3];
    let c2 = CODON_PATTERNS[(variant / 3) % 3];
    let fasta = format!(
        ">A\n{}{}\n>B\n{}{}\n>C\n{}{}\n",
        c1[0], c2[0], c1[1], c2[1], c1[2], c2[2]
    );
    std::fs::write(dir.join(format!("{stem}.fas")), fasta).unwrap();
    std::fs::write(dir.join(format!("{stem}.nwk")), "((A,B) #1,C);\n").unwrap();
    for (hyp, fix) in [("H0", 1), ("H1", 0)] {
        std::fs::write(
            dir.join(format!("{stem}.{hyp}.ctl")),
            format!(
                "seqfile = {stem}.fas\ntreefile = {stem}.nwk\noutfile = {stem}.{hyp}.out\n\
                 fix_omega = {fix}\nomega = 1\n"
            ),
        )
        .unwrap();
    }
}

/// Generate `n` bundles, eight per family directory.
pub fn make_corpus(root: &Path, n: usize) {
    for i in 0..n {
        let dir = root.join(format!("fam{:04}", i / 8));
        write_bundle(&dir, &format!("g{:02}", i % 8), i);
    }
}

pub fn site(id: &str, cores: u32) -> SiteSpec {
    SiteSpec {
        site_id: id.to_string(),
        cores,
        rtes: vec![DEFAULT_RTE.to_string()],
        queue_delay: 60,
        info_lag: 60,
        downtime_windows: Vec::new(),
        lost_multiplier: 1.0,
    }
}

pub fn five_sites(cores: u32) -> Vec<SiteSpec> {
    ["site-a", "site-b", "site-c", "site-d", "site-e"]
        .iter()
        .map(|id| site(id, cores))
        .collect()
}

/// Simulator config with the 20-30 minute duration model.
pub fn sim_config(seed: u64, sites: Vec<SiteSpec>, fault_plan: FaultPlan) -> SimConfig {
    SimConfig {
        seed,
        sites,
        fault_plan,
        duration_model: DurationModel {
            base_minutes: 25.0,
            spread: 0.2,
        },
        credential: None,
    }
}

/// Everything an acceptance check may want to audit after a campaign.
pub struct SimRun {
    pub session_dir: PathBuf,
    pub output_dir: PathBuf,
    pub jobs: BTreeMap<String, Job>,
    pub counters: Counters,
    pub trace: Vec<TraceEvent>,
    pub fault_log: Vec<FaultRecord>,
    pub report: CampaignReport,
    pub lrt_csv: String,
    /// Real time spent inside the campaign loop.
    pub elapsed: Duration,
    _tmp: tempfile::TempDir,
}

/// Run a full simulated campaign in-process on a virtual clock.
pub fn run_sim(
    corpus: &Path,
    engine_cfg: EngineConfig,
    sim_cfg: SimConfig,
    credential: Option<Credential>,
) -> SimRun {
    let tmp = tempfile::tempdir().unwrap();
    let session_dir = tmp.path().join("session");
    let output_dir = tmp.path().join("out");
    let clock = SimClock::new();
    let backend = SimBackend::new(
        sim_cfg,
        clock.clone() as Arc<dyn Clock>,
        &engine_cfg.required_rte,
        engine_cfg.ship_executable.is_some(),
    )
    .unwrap();
    let store = open_store(&session_dir, StoreKind::Indexed).unwrap();
    let lrt_threshold = engine_cfg.lrt_threshold;
    let mut engine = Engine::new(
        engine_cfg,
        credential.unwrap_or_else(Credential::everlasting),
        clock,
        Box::new(backend),
        store,
        session_dir.clone(),
    );
    let bundles = scan(corpus).unwrap();
    engine.init_campaign(bundles, &output_dir).unwrap();
    let start = Instant::now();
    let report = engine.run_campaign().unwrap();
    let elapsed = start.elapsed();
    let fault_log = engine
        .backend()
        .as_any()
        .downcast_ref::<SimBackend>()
        .unwrap()
        .fault_log()
        .to_vec();
    let lrt_csv = campaignd::report::lrt_csv(&engine.session, lrt_threshold).unwrap();
    SimRun {
        session_dir,
        output_dir,
        jobs: engine.session.jobs.clone(),
        counters: engine.session.counters,
        trace: engine.trace.clone(),
        fault_log,
        report,
        lrt_csv,
        elapsed,
        _tmp: tmp,
    }
}
