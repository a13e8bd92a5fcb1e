//! Order-preserving data-parallel helpers.
//!
//! With the `parallel` feature the closures fan out over rayon; without it
//! (or after [`set_sequential`]`(true)`) they run in order on the calling
//! thread. Outputs are always assembled in input order, and reductions that
//! must be reproducible fold in index order after the parallel map.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Forces sequential execution at runtime. Used by the benches to compare
/// both paths inside one binary.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Configures the global worker pool. Only the first call has an effect.
pub fn init_threads(jobs: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
}

pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Fallible variant of [`map`]; the first error in input order wins.
pub fn try_map<T, U, E, F>(items: &[T], f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

/// Sums `n` equally sized vectors produced by `f`.
///
/// In deterministic mode the partial vectors are added in index order. In
/// fast mode rayon's tree reduction is used, whose association order (and
/// hence the last bits of the result) depends on work splitting.
pub fn sum_vectors<F>(n: usize, len: usize, deterministic: bool, f: F) -> Vec<f64>
where
    F: Fn(usize) -> Vec<f64> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && !deterministic {
        return (0..n)
            .into_par_iter()
            .map(f)
            .reduce(|| vec![0.0; len], |mut a, b| {
                add_assign(&mut a, &b);
                a
            });
    }
    let _ = deterministic;
    let parts = map_range(n, f);
    let mut acc = vec![0.0; len];
    for p in &parts {
        add_assign(&mut acc, p);
    }
    acc
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}
