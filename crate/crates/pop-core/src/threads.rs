//! Worker-pool sizing.
//!
//! Parallel sections (importance estimation, diagnostics, figure jobs) run
//! on the global rayon pool. By default rayon sizes it to the machine; the
//! `POP_THREADS` environment variable pins it to an explicit count, which
//! the benchmark report echoes back. Every parallel reduction in this crate
//! is ordered, so the worker count never changes any numeric result — only
//! how fast it arrives.

use crate::error::{PopError, Result};

/// Environment variable that pins the worker count.
pub const THREADS_VAR: &str = "POP_THREADS";

/// Parses a `POP_THREADS` value: a positive integer.
fn parse_thread_count(value: &str) -> Result<usize> {
    let n: usize = value.trim().parse().map_err(|_| {
        PopError::Config(format!(
            "{THREADS_VAR} must be a positive integer, got {value:?}"
        ))
    })?;
    if n == 0 {
        return Err(PopError::Config(format!(
            "{THREADS_VAR} must be at least 1"
        )));
    }
    Ok(n)
}

/// Reads `POP_THREADS` if set; `None` means "let rayon decide".
pub fn worker_count_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(std::env::VarError::NotUnicode(_)) => Err(PopError::Config(format!(
            "{THREADS_VAR} is not valid UTF-8"
        ))),
        Ok(value) => parse_thread_count(&value).map(Some),
    }
}

/// Applies `POP_THREADS` to the global pool and returns the effective
/// worker count. Must run before the first parallel section — the global
/// pool can only be sized once per process.
pub fn init_worker_pool() -> Result<usize> {
    if let Some(n) = worker_count_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| {
                PopError::Config(format!(
                    "cannot apply {THREADS_VAR}={n}: worker pool already started ({e})"
                ))
            })?;
    }
    Ok(rayon::current_num_threads())
}
