//! Exit-code and flag contract of the `campaignd` binary, plus
//! executable-shipping behavior.

mod common;

use std::path::Path;
use std::process::Command;

use campaignd::backend::FaultPlan;
use campaignd::model::EngineConfig;

fn campaignd_cmd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_campaignd"))
}

#[test]
fn missing_input_flag_is_usage_error() {
    let out = campaignd_cmd().args(["run", "-o", "/tmp/x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sub_minute_polling_rejected_on_local_backend() {
    let tmp = tempfile::tempdir().unwrap();
    let out = campaignd_cmd()
        .args(["run", "-i"])
        .arg(tmp.path())
        .arg("-o")
        .arg(tmp.path().join("out"))
        .args(["-p", "30", "--backend", "local"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("polling interval below 60"), "stderr: {stderr}");
}

#[test]
fn sub_minute_polling_allowed_on_simulator() {
    // Same flag value is fine against the simulated back-end.
    let tmp = tempfile::tempdir().unwrap();
    common::make_corpus(&tmp.path().join("in"), 2);
    let sim = common::sim_config(1, vec![common::site("site-a", 4)], FaultPlan::default());
    let sim_toml = tmp.path().join("sim.toml");
    std::fs::write(&sim_toml, toml::to_string(&sim).unwrap()).unwrap();
    let out = campaignd_cmd()
        .args(["run", "-i"])
        .arg(tmp.path().join("in"))
        .arg("-o")
        .arg(tmp.path().join("out"))
        .args(["-p", "30", "--backend", "sim", "--sim-config"])
        .arg(&sim_toml)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn resume_nonexistent_session_is_usage_error() {
    let out = campaignd_cmd()
        .args(["resume", "--session", "/nonexistent/session/dir"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn lrt_with_no_completed_jobs_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = campaignd_cmd()
        .args(["lrt", "--session"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

fn run_small_campaign(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let input = root.join("in");
    common::make_corpus(&input, 4);
    let sim = common::sim_config(2, vec![common::site("site-a", 4)], FaultPlan::default());
    let sim_toml = root.join("sim.toml");
    std::fs::write(&sim_toml, toml::to_string(&sim).unwrap()).unwrap();
    let outdir = root.join("out");
    let session = root.join("sess");
    let out = campaignd_cmd()
        .args(["run", "-i"])
        .arg(&input)
        .arg("-o")
        .arg(&outdir)
        .args(["--backend", "sim", "--sim-config"])
        .arg(&sim_toml)
        .arg("--session")
        .arg(&session)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    (outdir, session)
}

#[test]
fn terminal_session_resume_report_and_lrt() {
    let tmp = tempfile::tempdir().unwrap();
    let (outdir, session) = run_small_campaign(tmp.path());

    // Resume of a finished campaign is an idempotent success.
    let resume = campaignd_cmd()
        .args(["resume", "--session"])
        .arg(&session)
        .output()
        .unwrap();
    assert_eq!(resume.status.code(), Some(0));

    // Report CSV is byte-deterministic across invocations.
    let csv_a = tmp.path().join("a.csv");
    let csv_b = tmp.path().join("b.csv");
    for csv in [&csv_a, &csv_b] {
        let st = campaignd_cmd()
            .args(["report", "--session"])
            .arg(&session)
            .arg("--csv")
            .arg(csv)
            .output()
            .unwrap();
        assert_eq!(st.status.code(), Some(0));
    }
    let a = std::fs::read(&csv_a).unwrap();
    assert_eq!(a, std::fs::read(&csv_b).unwrap());
    assert!(String::from_utf8_lossy(&a).starts_with("job_id,attempts,final_site,wall_seconds,state"));

    // The LRT table over the same session succeeds and matches the one
    // written at campaign end.
    let lrt = campaignd_cmd()
        .args(["lrt", "--session"])
        .arg(&session)
        .output()
        .unwrap();
    assert_eq!(lrt.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&lrt.stdout);
    assert_eq!(stdout, std::fs::read_to_string(outdir.join("lrt.csv")).unwrap());
}

#[test]
fn rerun_on_existing_session_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (_outdir, session) = run_small_campaign(tmp.path());
    let input = tmp.path().join("in");
    let again = campaignd_cmd()
        .args(["run", "-i"])
        .arg(&input)
        .arg("-o")
        .arg(tmp.path().join("out2"))
        .args(["--backend", "sim", "--sim-config"])
        .arg(tmp.path().join("sim.toml"))
        .arg("--session")
        .arg(&session)
        .output()
        .unwrap();
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("resume"));
}

#[test]
fn shipped_executable_lifts_rte_requirement() {
    // A site advertising no runtime environments still accepts jobs when
    // the worker executable travels with them.
    let corpus = tempfile::tempdir().unwrap();
    common::make_corpus(corpus.path(), 4);
    let mut bare_site = common::site("bare", 4);
    bare_site.rtes.clear();
    let cfg = EngineConfig {
        ship_executable: Some(env!("CARGO_BIN_EXE_worker").into()),
        ..EngineConfig::default()
    };
    let run = common::run_sim(
        corpus.path(),
        cfg,
        common::sim_config(4, vec![bare_site], FaultPlan::default()),
        None,
    );
    assert_eq!(run.report.done, 4);
}

#[test]
fn without_shipping_a_bare_site_campaign_cannot_start() {
    // Sanity inverse of the shipping test: no RTE and no shipped
    // executable means no eligible site, so nothing is ever submitted and
    // the engine gives up at its tick budget.
    let corpus = tempfile::tempdir().unwrap();
    common::make_corpus(corpus.path(), 1);
    let mut bare_site = common::site("bare", 4);
    bare_site.rtes.clear();
    let cfg = EngineConfig {
        max_ticks: 50,
        ..EngineConfig::default()
    };
    let result = std::panic::catch_unwind(|| {
        common::run_sim(
            corpus.path(),
            cfg,
            common::sim_config(5, vec![bare_site], FaultPlan::default()),
            None,
        )
    });
    assert!(result.is_err(), "campaign must not complete without an eligible site");
}
