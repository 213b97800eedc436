//! Data-parallel execution helpers with a sequential fallback.
//!
//! Every hot loop in the crate is expressed as independent work units (output
//! planes of a convolution, scans of a dataset) driven through these helpers.
//! With the `parallel` feature (default) the units run on the rayon pool;
//! without it they run sequentially. Each unit is internally sequential with a
//! fixed reduction order, so the two paths are bitwise identical and results
//! do not depend on thread count or schedule.
//!
//! The `*_seq` variants are always compiled; the benches compare them against
//! the feature-selected path.

/// Runs `f` over equally sized mutable chunks of `data`, sequentially.
pub fn for_each_chunk_seq<T, F>(data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
    T: Send,
{
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Maps `f` over `0..n`, collecting results in index order, sequentially.
pub fn map_indexed_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
    R: Send,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
mod imp {
    use rayon::prelude::*;

    pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [T]) + Sync,
        T: Send,
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }

    pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
    where
        F: Fn(usize) -> R + Sync + Send,
        R: Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
mod imp {
    pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [T]) + Sync,
        T: Send,
    {
        super::for_each_chunk_seq(data, chunk, f);
    }

    pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
    where
        F: Fn(usize) -> R + Sync + Send,
        R: Send,
    {
        super::map_indexed_seq(n, f)
    }
}

pub use imp::{for_each_chunk, map_indexed};

/// Configures the global thread pool from the `BAM_THREADS` environment
/// variable. No-op when unset, zero, unparsable, or when the pool was already
/// built. Without the `parallel` feature this always succeeds silently.
pub fn init_threads_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("BAM_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n > 0 {
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_and_sequential_agree() {
        let mut a = vec![0u64; 64];
        let mut b = vec![0u64; 64];
        for_each_chunk(&mut a, 8, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 100 + j) as u64;
            }
        });
        for_each_chunk_seq(&mut b, 8, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 100 + j) as u64;
            }
        });
        assert_eq!(a, b);
    }

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(100, |i| i * i);
        assert_eq!(v, map_indexed_seq(100, |i| i * i));
        assert_eq!(v[7], 49);
    }
}
