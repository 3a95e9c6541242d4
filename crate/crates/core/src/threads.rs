//! Worker-pool setup. `HQDM_THREADS` caps parallelism; every parallel loop
//! in the crate assigns disjoint output regions, so results are bitwise
//! identical for any thread count.

use std::sync::OnceLock;

use rayon::ThreadPool;

static POOL: OnceLock<ThreadPool> = OnceLock::new();

/// Shared pool, built on first use from the `HQDM_THREADS` environment
/// variable (0 or unset means the rayon default).
pub fn pool() -> &'static ThreadPool {
    POOL.get_or_init(|| {
        let n = std::env::var("HQDM_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("worker pool construction")
    })
}
