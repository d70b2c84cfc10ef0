//! Thin data-parallel helpers with a sequential fallback.
//!
//! The crate's hot loops share three shapes: independent updates of
//! fixed-size chunks of a flat arena (factor and variable message passes),
//! the same with a reusable per-worker scratch buffer, and an
//! index-addressed map into a fresh `Vec` (Monte Carlo sampling). Each helper
//! has a rayon implementation behind the `parallel` feature and an equivalent
//! sequential one without it, so results never depend on thread count:
//! workers only write to disjoint chunks or distinct indices, and callers do
//! any floating-point reduction sequentially afterwards.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to each `chunk_len`-sized chunk of `data` with its chunk index.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in data.chunks_mut(chunk_len).enumerate() {
            f(i, c);
        }
    }
}

/// Like [`for_each_chunk`], but hands each worker a scratch value built by
/// `init` (allocated once per worker, not once per chunk).
pub fn for_each_chunk_init<T, S, I, F>(data: &mut [T], chunk_len: usize, init: I, f: F)
where
    T: Send,
    S: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each_init(&init, |s, (i, c)| f(s, i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut s = init();
        for (i, c) in data.chunks_mut(chunk_len).enumerate() {
            f(&mut s, i, c);
        }
    }
}

/// Collect `f(0), f(1), ..., f(len - 1)` into a `Vec`, in index order.
pub fn map_indexed<R, F>(len: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..len).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..len).map(f).collect()
    }
}
