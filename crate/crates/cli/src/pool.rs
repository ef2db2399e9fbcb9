//! Bounded pool of worker processes.

use std::collections::VecDeque;
use std::ffi::OsString;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::thread;

use anyhow::{anyhow, Result};

/// Runs `program` once per argument list, at most `workers` at a time.
/// Returns the argument lists whose process failed.
pub fn run_processes(program: &Path, jobs: Vec<Vec<OsString>>, workers: usize) -> Result<Vec<Vec<OsString>>> {
    let queue = Mutex::new(jobs.into_iter().collect::<VecDeque<_>>());
    let failed = Mutex::new(Vec::new());
    let spawn_error = Mutex::new(None);
    thread::scope(|s| {
        for _ in 0..workers.max(1) {
            s.spawn(|| loop {
                let Some(args) = queue.lock().expect("queue lock").pop_front() else { break };
                match Command::new(program).args(&args).status() {
                    Ok(status) if status.success() => {}
                    Ok(_) => failed.lock().expect("failure lock").push(args),
                    Err(e) => {
                        spawn_error.lock().expect("error lock").get_or_insert(anyhow!("cannot start {}: {e}", program.display()));
                        failed.lock().expect("failure lock").push(args);
                    }
                }
            });
        }
    });
    if let Some(e) = spawn_error.into_inner().expect("error lock") {
        return Err(e);
    }
    Ok(failed.into_inner().expect("failure lock"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_failing_jobs() {
        let sh = Path::new("/bin/sh");
        if !sh.exists() {
            return;
        }
        let jobs: Vec<Vec<OsString>> = ["exit 0", "exit 3", "true"].iter().map(|c| vec!["-c".into(), (*c).into()]).collect();
        let failed = run_processes(sh, jobs, 2).unwrap();
        assert_eq!(failed, vec![vec![OsString::from("-c"), OsString::from("exit 3")]]);
    }

    #[test]
    fn missing_program_is_an_error() {
        let jobs = vec![vec![OsString::from("x")]];
        assert!(run_processes(Path::new("/nonexistent/tidn-worker"), jobs, 1).is_err());
    }
}
