//! Worker-thread pool setup.
//!
//! The kernels in [`crate::tensor`] parallelize over independent output
//! regions, so results are bit-identical for any thread count. The
//! `CONDA_ASSOC_THREADS` environment variable caps the pool size.

use std::sync::Once;

static INIT: Once = Once::new();

/// Initialize the global worker pool once, honoring `CONDA_ASSOC_THREADS`.
///
/// Called lazily by the heavy kernels; safe to call repeatedly.
pub fn init_pool() {
    INIT.call_once(|| {
        if let Ok(v) = std::env::var("CONDA_ASSOC_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    // Ignore failure: a pool may already exist in this process.
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}
