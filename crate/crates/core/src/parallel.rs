use crate::error::{Error, Result};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "NETXFORM_THREADS";

/// Thread count from `NETXFORM_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Runs `f` on a dedicated pool with `threads` workers (machine parallelism
/// when `None`).
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidProblem(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
