//! Data-parallel map with a sequential fallback.
//!
//! Worker count comes from `MMOT_THREADS` (default 1). Results are always
//! returned in input order, so reductions over them are order-independent of
//! scheduling.

/// Execution strategy for [`map`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Rayon pool sized by [`threads`]; sequential when the `parallel` feature is off.
    #[default]
    Parallel,
}

pub const THREADS_VAR: &str = "MMOT_THREADS";

/// Worker cap from `MMOT_THREADS`, default 1.
pub fn threads() -> usize {
    std::env::var(THREADS_VAR).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0).unwrap_or(1)
}

#[cfg(feature = "parallel")]
fn pool() -> &'static rayon::ThreadPool {
    use std::sync::OnceLock;
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads())
            .thread_name(|i| format!("mmot-worker-{i}"))
            .build()
            .expect("thread pool")
    })
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        Exec::Parallel => parallel_map(n, f),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let pool = pool();
    if pool.current_num_threads() <= 1 {
        return (0..n).map(f).collect();
    }
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Applies `f` to every element in place, returning results in order.
pub fn map_mut<X, R, F>(exec: Exec, items: &mut [X], f: F) -> Vec<R>
where
    X: Send,
    R: Send,
    F: Fn(usize, &mut X) -> R + Sync + Send,
{
    match exec {
        Exec::Sequential => items.iter_mut().enumerate().map(|(i, x)| f(i, x)).collect(),
        Exec::Parallel => parallel_map_mut(items, f),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map_mut<X, R, F>(items: &mut [X], f: F) -> Vec<R>
where
    X: Send,
    R: Send,
    F: Fn(usize, &mut X) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let pool = pool();
    if pool.current_num_threads() <= 1 {
        return items.iter_mut().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    pool.install(|| items.par_iter_mut().enumerate().map(|(i, x)| f(i, x)).collect())
}

#[cfg(not(feature = "parallel"))]
fn parallel_map_mut<X, R, F>(items: &mut [X], f: F) -> Vec<R>
where
    X: Send,
    R: Send,
    F: Fn(usize, &mut X) -> R + Sync + Send,
{
    items.iter_mut().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Maps over `0..n` on a dedicated pool of `workers` threads, ignoring
/// `MMOT_THREADS`. Used by benchmarks to compare worker counts.
#[cfg(feature = "parallel")]
pub fn map_with_workers<R, F>(workers: usize, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool");
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}
