//! Optional stage-level parallelism, capped by `PDENMPC_THREADS`.
//!
//! `0` or unset means sequential. Per-stage work is independent, so the
//! parallel and sequential paths produce identical bits.

use std::sync::OnceLock;

pub const THREADS_ENV: &str = "PDENMPC_THREADS";

/// Thread count requested through the environment (0 = sequential).
pub fn requested_threads() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0)
}

/// The shared pool, or `None` when running sequentially.
pub fn pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| match requested_threads() {
        0 => None,
        n => rayon::ThreadPoolBuilder::new().num_threads(n).build().ok(),
    })
    .as_ref()
}
