//! Execution configuration: determinism mode, thread pool, and reduction
//! helpers shared by all numeric kernels.
//!
//! Every parallel kernel in this crate assigns each output element to exactly
//! one task and keeps the summation order inside a task fixed, so results do
//! not depend on the worker count. The only place thread scheduling could
//! change floating-point results is in the generic reduction helpers below;
//! deterministic mode combines partial sums in fixed chunk order, fast mode
//! lets rayon combine them in whatever order the tasks finish.

use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::tensor::Element;

static DETERMINISTIC: AtomicBool = AtomicBool::new(true);

/// Fixed chunk length for parallel reductions. Must not depend on the thread
/// count or results would too.
pub(crate) const REDUCE_CHUNK: usize = 1 << 14;

pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::Relaxed);
}

pub fn deterministic() -> bool {
    DETERMINISTIC.load(Ordering::Relaxed)
}

/// Configure the global rayon pool. May only succeed once per process;
/// later calls with a different size are ignored (rayon limitation), which
/// is fine for a CLI that configures threads at startup.
pub fn set_threads(n: usize) {
    if n == 0 {
        return;
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

/// Sum of a slice. Parallel over fixed-size chunks; chunk partials are
/// combined in index order in deterministic mode.
pub fn sum<T: Element>(xs: &[T]) -> T {
    if xs.len() <= REDUCE_CHUNK {
        return xs.iter().fold(T::zero(), |a, &b| a + b);
    }
    let partials: Vec<T> = xs
        .par_chunks(REDUCE_CHUNK)
        .map(|c| c.iter().fold(T::zero(), |a, &b| a + b))
        .collect();
    if deterministic() {
        partials.iter().fold(T::zero(), |a, &b| a + b)
    } else {
        partials.into_par_iter().reduce(T::zero, |a, b| a + b)
    }
}

/// Sum of f(x) over a slice, same scheduling contract as [`sum`].
pub fn sum_by<T: Element, F: Fn(T) -> T + Sync>(xs: &[T], f: F) -> T {
    if xs.len() <= REDUCE_CHUNK {
        return xs.iter().fold(T::zero(), |a, &b| a + f(b));
    }
    let partials: Vec<T> = xs
        .par_chunks(REDUCE_CHUNK)
        .map(|c| c.iter().fold(T::zero(), |a, &b| a + f(b)))
        .collect();
    if deterministic() {
        partials.iter().fold(T::zero(), |a, &b| a + b)
    } else {
        partials.into_par_iter().reduce(T::zero, |a, b| a + b)
    }
}

/// Sum of f(a, b) over two zipped slices, same scheduling contract as [`sum`].
pub fn sum_zip<T: Element, F: Fn(T, T) -> T + Sync>(xs: &[T], ys: &[T], f: F) -> T {
    debug_assert_eq!(xs.len(), ys.len());
    if xs.len() <= REDUCE_CHUNK {
        return xs.iter().zip(ys).fold(T::zero(), |a, (&x, &y)| a + f(x, y));
    }
    let partials: Vec<T> = xs
        .par_chunks(REDUCE_CHUNK)
        .zip(ys.par_chunks(REDUCE_CHUNK))
        .map(|(cx, cy)| cx.iter().zip(cy).fold(T::zero(), |a, (&x, &y)| a + f(x, y)))
        .collect();
    if deterministic() {
        partials.iter().fold(T::zero(), |a, &b| a + b)
    } else {
        partials.into_par_iter().reduce(T::zero, |a, b| a + b)
    }
}
