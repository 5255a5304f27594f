//! Per-item fan-out. With the `parallel` feature the work is spread over the
//! rayon pool; without it everything runs on the calling thread. Results are
//! always returned in input order, so reductions stay deterministic.

/// Map `f` over `0..n`, in parallel when the feature is enabled.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_indexed_parallel(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_sequential(n, f)
    }
}

pub fn map_indexed_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_indexed_parallel<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Fallible variant; the first error in index order wins.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

/// Size the global pool. A no-op without the `parallel` feature.
pub fn set_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        if n > 0 {
            // Fails only if the pool was already initialized; keep the existing one.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}
