//! Replica loops that run in parallel when the `parallel` feature is on.
//!
//! Work is split into fixed-size chunks whose random streams depend only on the
//! chunk index, so results never depend on the number of workers.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Calls `f(chunk_index, len)` for consecutive chunks covering `total` items.
pub fn chunked<T, F>(total: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, usize) -> T + Sync + Send,
{
    let chunk = chunk.max(1);
    let n = total.div_ceil(chunk);
    map_range(n, |i| f(i, chunk.min(total - i * chunk)))
}
