//! Bounded worker pool with in-order result delivery.
//!
//! Jobs are pulled from a shared counter by `workers` threads; results
//! flow through a channel to the caller's sink, which receives them in
//! job-index order regardless of completion order. That keeps log files
//! byte-identical across worker counts.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

/// Default worker count: the `MUPDIT_WORKERS` variable, else available
/// parallelism, else 1.
pub fn default_workers() -> usize {
    if let Ok(v) = std::env::var("MUPDIT_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Run `jobs` jobs on `workers` threads; `work(i)` produces the result
/// for job `i`; `sink(i, result)` is invoked in increasing `i` order.
pub fn run_ordered<T, W, S>(jobs: usize, workers: usize, work: W, mut sink: S)
where
    T: Send,
    W: Fn(usize) -> T + Sync,
    S: FnMut(usize, T),
{
    if jobs == 0 {
        return;
    }
    let workers = workers.max(1).min(jobs);
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, T)>();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let work = &work;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs {
                    break;
                }
                let result = work(i);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // reorder buffer: deliver strictly in index order
        let mut pending: BTreeMap<usize, T> = BTreeMap::new();
        let mut expected = 0usize;
        for (i, result) in rx {
            pending.insert(i, result);
            while let Some(result) = pending.remove(&expected) {
                sink(expected, result);
                expected += 1;
            }
        }
    });
}
