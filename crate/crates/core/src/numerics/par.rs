//! Data-parallel loop helpers with a sequential fallback.
//!
//! Every helper here is deterministic by construction: work is split over
//! disjoint output regions (`for_each_chunk_mut`) or produces an indexed
//! vector that callers reduce in a fixed order (`map_indexed`). Results are
//! therefore bit-identical whether the `parallel` feature is on or off and
//! regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum elements per chunk before splitting is worth the overhead.
const MIN_CHUNK: usize = 1024;

/// Apply `f(chunk_index, chunk)` to consecutive `chunk_len` slices of `data`.
/// Chunks are disjoint, so the parallel and sequential paths write the same
/// bytes.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        if data.len() > MIN_CHUNK && data.len() > chunk_len {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// `(0..n).map(f)` collected in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Number of worker threads in use (1 when sequential).
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
