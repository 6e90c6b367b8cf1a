//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) independent work items are spread
//! over the rayon pool; without it, or after [`set_sequential`], everything
//! runs on the calling thread. Results always come back in index order, so
//! callers that reduce them sequentially stay bit-identical across modes.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential path even when the `parallel` feature is compiled in.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// True when work is actually dispatched to the rayon pool.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<T, G>(n: usize, f: G) -> Vec<T>
where
    T: Send,
    G: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if n > 1 && is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Fallible variant of [`map_range`]; the first error by index wins.
pub fn try_map_range<T, E, G>(n: usize, f: G) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    G: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_range(n, f).into_iter().collect()
}
