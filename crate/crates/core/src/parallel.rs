//! Data-parallel execution helpers.
//!
//! With the `parallel` feature the helpers fan work out over rayon; without it
//! (or after [`set_enabled(false)`](set_enabled)) they run the same closures
//! in order on the calling thread. Every caller partitions work so that each
//! output element is produced by exactly one closure invocation, so results
//! are bit-identical either way.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Below this many multiply-adds a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
pub(crate) const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Runtime switch between the parallel and sequential paths. Has no effect
/// when the crate is built without the `parallel` feature.
pub fn set_enabled(enabled: bool) {
    ENABLED.store(enabled, Ordering::Relaxed);
}

pub fn enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Sizes the global worker pool. Must run before the first parallel call;
/// later calls are ignored with a warning.
pub fn configure_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
    }
}

pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        if enabled() {
            return rayon::current_num_threads();
        }
    }
    1
}

/// Calls `f(row_index, row)` for every `row_len`-sized chunk of `out`.
pub(crate) fn for_each_row<T, F>(out: &mut [T], row_len: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if enabled() && work >= MIN_PARALLEL_WORK && out.len() > row_len {
            use rayon::prelude::*;
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Maps `f` over `0..n`, returning results in index order.
pub(crate) fn map_indices<R, F>(n: usize, work: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if enabled() && n > 1 && work >= MIN_PARALLEL_WORK {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = work;
    (0..n).map(f).collect()
}
