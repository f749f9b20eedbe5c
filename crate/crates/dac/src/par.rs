//! Data-parallel helper with a sequential fallback.
//!
//! The hot loops (distance queries, batch softmax, loss sums) are
//! independent per row, so parallel execution is deterministic: results
//! land at fixed indices regardless of schedule. Building without the
//! `parallel` feature compiles the sequential path only.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
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

/// Sequential variant, always available (benchmark baseline).
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
