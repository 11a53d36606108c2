//! Data-parallel execution helpers. With the `parallel` feature (default)
//! these fan out over rayon; without it they fall back to plain iterators so
//! the crate builds on single-threaded targets. Callers must not capture
//! mutable state: every closure is a pure function of its input, and RNG
//! streams are derived per task, never shared.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, collecting in index order.
#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, collecting in order.
#[cfg(feature = "parallel")]
pub(crate) fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Index of the minimum of `f` over `0..n` (ties to the lowest index),
/// together with the minimum value. `n` must be nonzero.
pub(crate) fn argmin_indexed<F>(n: usize, f: F) -> (usize, f64)
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    assert!(n > 0);
    let vals = map_indexed(n, f);
    let mut best = (0usize, vals[0]);
    for (i, v) in vals.into_iter().enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

pub(crate) fn init_thread_cap() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("NVHL_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    // Ignore the error: the global pool can only be built once.
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}
