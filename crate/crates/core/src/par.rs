//! Data-parallel loop helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run plain sequential loops. Both paths write disjoint output slices
//! and perform reductions in index order, so results are bit-identical
//! regardless of feature selection or thread count.
//!
//! The `KMOE_THREADS` environment variable caps the rayon pool size.

#[cfg(feature = "parallel")]
use std::sync::Once;

#[cfg(feature = "parallel")]
static POOL_INIT: Once = Once::new();

/// Initializes the global rayon pool once, honoring `KMOE_THREADS`.
#[cfg(feature = "parallel")]
pub fn init_pool() {
    POOL_INIT.call_once(|| {
        if let Ok(v) = std::env::var("KMOE_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    // Ignore the error: a pool may already exist (e.g. under test harnesses).
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}

#[cfg(not(feature = "parallel"))]
pub fn init_pool() {}

/// Applies `f` to each chunk of `data` of length `chunk`, passing the chunk
/// index. Small chunks are grouped into coarser tasks so task dispatch does
/// not dominate row-sized work; grouping never changes results because every
/// chunk still gets its own disjoint slice.
pub fn for_each_chunk_mut<T: Send, F>(data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        init_pool();
        use rayon::prelude::*;
        const MIN_TASK_ELEMS: usize = 4096;
        let group = (MIN_TASK_ELEMS / chunk).max(1);
        data.par_chunks_mut(chunk * group)
            .enumerate()
            .for_each(|(gi, gslice)| {
                for (j, c) in gslice.chunks_mut(chunk).enumerate() {
                    f(gi * group + j, c);
                }
            });
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<R: Send, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        init_pool();
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
