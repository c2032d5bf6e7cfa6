//! Deterministic data parallelism.
//!
//! Work is split into disjoint output chunks, so the result is bitwise
//! identical no matter how many worker threads run. `SPIKESHIELD_THREADS`
//! caps the worker count; unset or unparsable means all available cores.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREAD_OVERRIDE: AtomicUsize = AtomicUsize::new(0);

/// Force a worker count, taking precedence over `SPIKESHIELD_THREADS`.
/// Zero restores environment-driven behaviour.
pub fn set_worker_threads(n: usize) {
    THREAD_OVERRIDE.store(n, Ordering::Relaxed);
}

/// Number of worker threads to use: min(cap, available parallelism), where
/// the cap comes from [`set_worker_threads`] or `SPIKESHIELD_THREADS`.
pub(crate) fn worker_threads() -> usize {
    let mut cap = THREAD_OVERRIDE.load(Ordering::Relaxed);
    if cap == 0 {
        cap = std::env::var("SPIKESHIELD_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0);
    }
    let hw = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    if cap == 0 {
        hw
    } else {
        cap.min(hw)
    }
}

/// Run `f(chunk_index, chunk)` over `data` split into `chunk_len` pieces,
/// distributing chunks round-robin across workers. Chunks are disjoint, so
/// no two workers touch the same element and iteration order inside each
/// chunk is sequential: output bits do not depend on the worker count.
pub(crate) fn par_chunks_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    let n_chunks = data.len().div_ceil(chunk_len);
    let workers = worker_threads().min(n_chunks).max(1);
    if workers <= 1 || n_chunks <= 1 {
        for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
            f(i, chunk);
        }
        return;
    }
    let mut per_worker: Vec<Vec<(usize, &mut [T])>> = (0..workers).map(|_| Vec::new()).collect();
    for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
        per_worker[i % workers].push((i, chunk));
    }
    std::thread::scope(|scope| {
        for own in per_worker {
            scope.spawn(|| {
                for (i, chunk) in own {
                    f(i, chunk);
                }
            });
        }
    });
}
