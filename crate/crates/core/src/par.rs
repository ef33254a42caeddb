//! Parallel execution helpers.
//!
//! Every data-parallel kernel routes through these so that the whole crate
//! can be built with or without rayon (`parallel` feature). Work is always
//! split so each task owns a disjoint output slice and accumulates in a
//! fixed order, which keeps results bit-identical across thread counts and
//! between the parallel and sequential builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for a kernel call. `Auto` resolves to rayon when the
/// `parallel` feature is enabled, sequential otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Auto,
    Sequential,
    #[cfg(feature = "parallel")]
    Rayon,
}

impl Parallelism {
    #[inline]
    pub(crate) fn is_parallel(self) -> bool {
        match self {
            Parallelism::Sequential => false,
            Parallelism::Auto => cfg!(feature = "parallel"),
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => true,
        }
    }
}

/// Apply `f` to equal-sized disjoint chunks of `out`, passing the chunk index.
pub(crate) fn for_each_chunk_mut<F>(par: Parallelism, out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = par;
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Run `f(i)` for `i in 0..n`, collecting results in index order.
pub(crate) fn map_indexed<T, F>(par: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = par;
    (0..n).map(f).collect()
}
