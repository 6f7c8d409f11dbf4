//! Data-parallel loop helpers.
//!
//! With the `parallel` feature the helpers fan out over the current rayon
//! pool; without it they run the same closures in order on the calling
//! thread. Every helper partitions work into disjoint outputs, so results are
//! bit-identical between the two builds and across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// True when the crate was built with the `parallel` feature.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Calls `f(index, chunk)` for each `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk_mut`] but walks two buffers in lockstep.
pub fn for_each_chunk_pair_mut<F>(
    a: &mut [f64],
    a_chunk: usize,
    b: &mut [f64],
    b_chunk: usize,
    f: F,
) where
    F: Fn(usize, &mut [f64], &mut [f64]) + Send + Sync,
{
    if a_chunk == 0 || b_chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(a_chunk)
        .zip(b.par_chunks_mut(b_chunk))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(a_chunk)
        .zip(b.chunks_mut(b_chunk))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

/// Evaluates `f(i)` for `i in 0..n`, returning results in index order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
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

/// Elementwise `out[i] = f(input[i])`.
pub fn map_into<F>(input: &[f64], out: &mut [f64], f: F)
where
    F: Fn(f64) -> f64 + Send + Sync,
{
    #[cfg(feature = "parallel")]
    out.par_iter_mut()
        .zip(input.par_iter())
        .with_min_len(4096)
        .for_each(|(o, &x)| *o = f(x));
    #[cfg(not(feature = "parallel"))]
    out.iter_mut().zip(input).for_each(|(o, &x)| *o = f(x));
}
