//! Bounded fan-out over scoped threads. Output order always matches input
//! order, so results are independent of the worker count.

use std::num::NonZeroUsize;

/// Environment variable consulted when no explicit worker cap is given.
pub const WORKERS_ENV: &str = "SIM_WORKERS";

/// Worker cap: explicit value, else `SIM_WORKERS`, else available cores.
pub fn resolve_workers(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, NonZeroUsize::get))
}

/// Applies `f(index, item)` to every item using at most `workers` threads.
pub fn par_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync,
{
    let n = items.len();
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return items.into_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut groups: Vec<Vec<(usize, T)>> = (0..workers).map(|_| Vec::new()).collect();
    for (i, t) in items.into_iter().enumerate() {
        groups[i % workers].push((i, t));
    }
    let f = &f;
    let mut out: Vec<(usize, R)> = std::thread::scope(|s| {
        let handles: Vec<_> = groups
            .into_iter()
            .map(|group| s.spawn(move || group.into_iter().map(|(i, t)| (i, f(i, t))).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
            .collect()
    });
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_worker_count() {
        let want: Vec<usize> = (0..23).map(|i| i * i).collect();
        for w in [1, 2, 5, 64] {
            assert_eq!(par_map((0..23).collect(), w, |_, x: usize| x * x), want);
        }
        assert!(par_map(Vec::<u8>::new(), 4, |_, x| x).is_empty());
    }
}
