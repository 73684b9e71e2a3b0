//! Thin wrappers around the data-parallel inner loops.
//!
//! With the `parallel` feature (default) these fan out over rayon; without it
//! they fall back to plain sequential iteration. The `*_seq` variants are
//! always sequential so benchmarks can compare both paths in one build.
//! All wrappers are order-preserving: element `i` of the output always comes
//! from element `i` of the input, so results are identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map a function over a slice, in parallel when the feature allows it.
#[cfg(feature = "parallel")]
pub fn map_slice<T: Sync, U: Send, F: Fn(&T) -> U + Sync + Send>(items: &[T], f: F) -> Vec<U> {
    items.par_iter().map(|t| f(t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, U, F: Fn(&T) -> U>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Always-sequential counterpart of [`map_slice`].
pub fn map_slice_seq<T, U, F: Fn(&T) -> U>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Fallible map over index range `0..n`, parallel when enabled.
#[cfg(feature = "parallel")]
pub fn try_map_indices<U, E, F>(n: usize, f: F) -> Result<Vec<U>, E>
where
    U: Send,
    E: Send,
    F: Fn(usize) -> Result<U, E> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn try_map_indices<U, E, F>(n: usize, f: F) -> Result<Vec<U>, E>
where
    F: Fn(usize) -> Result<U, E>,
{
    (0..n).map(f).collect()
}

/// Always-sequential counterpart of [`try_map_indices`].
pub fn try_map_indices_seq<U, E, F>(n: usize, f: F) -> Result<Vec<U>, E>
where
    F: Fn(usize) -> Result<U, E>,
{
    (0..n).map(f).collect()
}
