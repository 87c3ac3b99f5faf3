//! Independent jobs on a bounded thread pool, results in job order.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Runs `f(0..count)` on at most `jobs` threads. Output order matches job
/// order regardless of scheduling; the first failing job (by index) wins.
pub fn run_jobs<T, F>(count: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if jobs <= 1 {
        return (0..count).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| (0..count).into_par_iter().map(&f).collect());
    results.into_iter().collect()
}
