//! Deterministic fan-out over independent work items.
//!
//! Work is cut into fixed-size chunks and results are merged in chunk
//! order, so the output is identical for any worker count. The worker
//! count comes from `set_threads` (the CLI wires it to ROBUSTAUG_THREADS)
//! and only affects wall time, never values.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Override the worker count. Zero means "use available parallelism".
pub fn set_threads(n: usize) {
    THREADS.store(n, Ordering::SeqCst);
}

pub fn threads() -> usize {
    let n = THREADS.load(Ordering::SeqCst);
    if n > 0 {
        return n;
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Chunk size used when fanning attack/eval batches out to workers.
/// Fixed (not derived from the thread count) so numeric results never
/// depend on how many workers happen to run.
pub const CHUNK: usize = 32;

/// Map `f` over chunks of `0..n` and collect per-chunk outputs in chunk
/// order. `f` receives the half-open index range of its chunk.
pub fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
{
    assert!(chunk > 0);
    let ranges: Vec<_> = (0..n)
        .step_by(chunk)
        .map(|s| s..(s + chunk).min(n))
        .collect();
    let workers = threads().min(ranges.len()).max(1);
    if workers == 1 {
        return ranges.into_iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut out: Vec<Option<T>> = (0..ranges.len()).map(|_| None).collect();
    let slots: Vec<std::sync::Mutex<&mut Option<T>>> =
        out.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= ranges.len() {
                    break;
                }
                let val = f(ranges[i].clone());
                **slots[i].lock().unwrap() = Some(val);
            });
        }
    });
    out.into_iter().map(|v| v.unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_order_is_chunk_order_for_any_worker_count() {
        let expect: Vec<Vec<usize>> = vec![vec![0, 1, 2], vec![3, 4, 5], vec![6]];
        for workers in [1, 2, 7] {
            set_threads(workers);
            let got = map_chunks(7, 3, |r| r.collect::<Vec<_>>());
            assert_eq!(got, expect);
        }
        set_threads(0);
    }
}
