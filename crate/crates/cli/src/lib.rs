//! Library side of the `ambientflow` command-line tool: the commands as
//! functions, run manifests, plot writers and process exit codes.

pub mod commands;
pub mod exit;
pub mod manifest;
pub mod pair;
pub mod plot;

pub use exit::{error_json, exit_code};
pub use manifest::{config_hash, Run, RunManifest};

use ambientflow::{Error, Result};

/// Environment variable capping worker threads.
pub const THREADS_VAR: &str = "AMBIENTFLOW_THREADS";

/// Worker threads allowed by `AMBIENTFLOW_THREADS`, defaulting to the
/// available parallelism.
pub fn worker_threads() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(format!("{THREADS_VAR} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Runs `job(i)` for `i in 0..count` on at most `threads` scoped threads and
/// returns the results in index order.
pub fn parallel_map<T, F>(count: usize, threads: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let threads = threads.clamp(1, count.max(1));
    if threads == 1 {
        return (0..count).map(&job).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..count).map(|_| None).collect();
    std::thread::scope(|scope| {
        let job = &job;
        let handles: Vec<_> = (0..threads)
            .map(|t| scope.spawn(move || (t..count).step_by(threads).map(|i| (i, job(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every index ran")).collect()
}
