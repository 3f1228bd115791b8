//! Order-preserving parallel map over independent work items.

use std::num::NonZeroUsize;
use std::thread;

/// Worker threads used by [`map`]: the available parallelism, at most `cap`.
pub fn workers(cap: usize) -> usize {
    thread::available_parallelism().map_or(1, NonZeroUsize::get).min(cap).max(1)
}

/// Applies `f` to every item on scoped threads and returns the results in
/// item order, independent of scheduling.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let n_workers = workers(items.len());
    if n_workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let f = &f;
    let mut tagged: Vec<(usize, R)> = thread::scope(|s| {
        let handles: Vec<_> = (0..n_workers)
            .map(|w| {
                s.spawn(move || {
                    items
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(n_workers)
                        .map(|(i, t)| (i, f(i, t)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    tagged.sort_by_key(|(i, _)| *i);
    tagged.into_iter().map(|(_, r)| r).collect()
}
