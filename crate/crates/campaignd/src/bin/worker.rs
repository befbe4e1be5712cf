//! Worker executable: runs one hypothesis described by a control file in
//! the current working directory, exactly as it would on a remote node.
//!
//! Test hooks (both optional):
//! - `CAMPAIGND_WORKER_DELAY_MS`: sleep this long before computing.
//! - `CAMPAIGND_WORKER_FAIL`: fail (exit 1, no output written) when the
//!   control-file path contains this substring.

use std::path::PathBuf;

fn main() {
    let mut args = std::env::args_os().skip(1);
    let (Some(ctl), None) = (args.next(), args.next()) else {
        eprintln!("usage: worker <ctl-file>");
        std::process::exit(2);
    };
    let ctl = PathBuf::from(ctl);

    if let Ok(ms) = std::env::var("CAMPAIGND_WORKER_DELAY_MS") {
        if let Ok(ms) = ms.parse::<u64>() {
            std::thread::sleep(std::time::Duration::from_millis(ms));
        }
    }
    if let Ok(pat) = std::env::var("CAMPAIGND_WORKER_FAIL") {
        if !pat.is_empty() && ctl.to_string_lossy().contains(&pat) {
            eprintln!("worker: injected failure for {}", ctl.display());
            std::process::exit(1);
        }
    }

    let parsed = match campaignd::scanner::parse_ctl(&ctl) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("worker: {e}");
            std::process::exit(1);
        }
    };
    let cwd = std::env::current_dir().expect("working directory");
    match campaignd::worker::run_task(&parsed, &cwd) {
        Ok(result) => {
            println!(
                "{}: lnL = {:.6}, omega = {:.6}",
                result.hypothesis, result.lnl, result.omega_hat
            );
        }
        Err(e) => {
            eprintln!("worker: {e}");
            std::process::exit(1);
        }
    }
}
