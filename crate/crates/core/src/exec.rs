//! Execution-strategy selection for the data-parallel inner loops.
//!
//! Every hot loop in the crate (im2col/gemm, Poisson CG sweeps, per-sample
//! metric evaluation) is written against [`Parallelism`] so the sequential
//! path stays available for benchmarking and for builds without the
//! `parallel` feature. Parallel splits always assign disjoint output ranges
//! to workers, so results are bit-identical to the sequential path.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[cfg(feature = "parallel")]
    Rayon,
}

impl Default for Parallelism {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        Parallelism::Rayon
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        Parallelism::Sequential
    }
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        match self {
            Parallelism::Sequential => false,
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => true,
        }
    }
}

/// Run `f(start, chunk)` over `data` split into chunks of `chunk_len`.
/// `start` is the element offset of the chunk.
pub fn for_each_chunk_mut<T, F>(par: Parallelism, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk_len > 0);
    match par {
        Parallelism::Sequential => {
            for (i, c) in data.chunks_mut(chunk_len).enumerate() {
                f(i * chunk_len, c);
            }
        }
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i * chunk_len, c));
        }
    }
}

/// Index-space loop `0..n`, parallelized when requested.
pub fn for_each_index<F>(par: Parallelism, n: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    match par {
        Parallelism::Sequential => {
            for i in 0..n {
                f(i);
            }
        }
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            (0..n).into_par_iter().for_each(f);
        }
    }
}

/// Map `0..n` to a Vec, preserving index order.
pub fn map_indices<T, F>(par: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match par {
        Parallelism::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}
