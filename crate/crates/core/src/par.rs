//! Data-parallel helpers. With the `parallel` feature these dispatch to rayon
//! once the work is large enough; without it everything runs sequentially.
//! Results never depend on the number of threads.

/// Below this many items the sequential path is used even when rayon is on.
pub const MIN_PARALLEL: usize = 2048;

/// Runs `f(index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if data.len() / chunk >= MIN_PARALLEL {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Collects `f(i)` for `i in 0..n` in index order.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n >= MIN_PARALLEL / 8 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Evaluates both closures, possibly concurrently.
pub fn join<A, B, RA, RB>(a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    #[cfg(feature = "parallel")]
    {
        rayon::join(a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (a(), b())
    }
}

/// Pairwise (cascade) sum of rows of a row-major `rows x dim` block, written
/// into `out`. The split points depend only on the row count.
pub fn pairwise_rows(values: &[f64], dim: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), dim);
    out.iter_mut().for_each(|o| *o = 0.0);
    if dim == 0 {
        return;
    }
    let rows = values.len() / dim;
    sum_range(values, dim, 0, rows, out);
}

const LEAF_ROWS: usize = 16;

fn sum_range(values: &[f64], dim: usize, lo: usize, hi: usize, out: &mut [f64]) {
    if hi - lo <= LEAF_ROWS {
        for r in lo..hi {
            let row = &values[r * dim..(r + 1) * dim];
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        return;
    }
    let mid = lo + (hi - lo) / 2;
    let mut left = vec![0.0; dim];
    let mut right = vec![0.0; dim];
    if hi - lo >= MIN_PARALLEL * 8 {
        join(
            || sum_range(values, dim, lo, mid, &mut left),
            || sum_range(values, dim, mid, hi, &mut right),
        );
    } else {
        sum_range(values, dim, lo, mid, &mut left);
        sum_range(values, dim, mid, hi, &mut right);
    }
    for ((o, l), r) in out.iter_mut().zip(&left).zip(&right) {
        *o = l + r;
    }
}

/// Pairwise sum of a scalar slice.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    let mut out = [0.0];
    pairwise_rows(values, 1, &mut out);
    out[0]
}
