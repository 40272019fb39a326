//! Worker pool sized by the `RESTD_THREADS` environment variable.

use std::sync::OnceLock;

use rayon::{ThreadPool, ThreadPoolBuilder};

pub const ENV_VAR: &str = "RESTD_THREADS";

fn pool() -> &'static ThreadPool {
    static POOL: OnceLock<ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut b = ThreadPoolBuilder::new();
        if let Some(n) = std::env::var(ENV_VAR).ok().and_then(|v| v.parse::<usize>().ok()) {
            b = b.num_threads(n.max(1));
        }
        b.build().expect("thread pool")
    })
}

/// Runs `f` inside the shared pool so nested parallel iterators honour the
/// thread cap.
pub fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    pool().install(f)
}

pub fn thread_count() -> usize {
    pool().current_num_threads()
}
