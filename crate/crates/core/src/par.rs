//! Data-parallel building blocks.
//!
//! With the `parallel` feature (default) the hot kernels fan out over rayon;
//! without it the same closures run sequentially. Every parallel site writes
//! disjoint output chunks and keeps reductions in a fixed order, so results
//! are bit-identical across thread counts and across the two modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f(chunk_index, chunk)` over consecutive `chunk_len` slices of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if data.is_empty() || chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// True when the `parallel` feature is compiled in.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Dot product with unrolled accumulators. The fixed accumulation pattern
/// keeps results identical between sequential and parallel builds.
#[inline]
pub fn dot<T: crate::dtype::Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc0 = T::zero();
    let mut acc1 = T::zero();
    let mut acc2 = T::zero();
    let mut acc3 = T::zero();
    let mut i = 0;
    while i + 4 <= n {
        acc0 += a[i] * b[i];
        acc1 += a[i + 1] * b[i + 1];
        acc2 += a[i + 2] * b[i + 2];
        acc3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut tail = T::zero();
    while i < n {
        tail += a[i] * b[i];
        i += 1;
    }
    ((acc0 + acc1) + (acc2 + acc3)) + tail
}

/// `out[j] += c * row[j]`; vectorizes well and is order-deterministic.
#[inline]
pub fn axpy<T: crate::dtype::Element>(out: &mut [T], c: T, row: &[T]) {
    debug_assert_eq!(out.len(), row.len());
    for (o, &r) in out.iter_mut().zip(row.iter()) {
        *o += c * r;
    }
}
