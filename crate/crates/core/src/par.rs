//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan out over rayon's pool;
//! without it they forward to the sequential versions in [`seq`]. Work is
//! always split into fixed-size pieces whose results are combined in index
//! order, so the output is bit-identical whatever the thread count.

use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, Axis};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row block size used when splitting matrix products.
const ROW_CHUNK: usize = 64;

/// Below this many multiply-adds a product is not worth splitting.
const PAR_MIN_WORK: usize = 1 << 18;

fn product_shape(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> (usize, usize, usize) {
    let (m, k) = a.dim();
    assert_eq!(k, b.nrows(), "matmul inner dimensions differ: {k} vs {}", b.nrows());
    (m, k, b.ncols())
}

/// Single-threaded versions of every helper, always compiled.
pub mod seq {
    use super::*;

    pub fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
        let (m, _, n) = product_shape(a, b);
        let mut out = Array2::<f64>::zeros((m, n));
        for (mut o, a_rows) in out
            .axis_chunks_iter_mut(Axis(0), ROW_CHUNK)
            .zip(a.axis_chunks_iter(Axis(0), ROW_CHUNK))
        {
            general_mat_mul(1.0, &a_rows, &b, 0.0, &mut o);
        }
        out
    }

    pub fn map_indexed<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
        (0..n).map(f).collect()
    }

    pub fn map_slice<I, T, F: Fn(&I) -> T>(items: &[I], f: F) -> Vec<T> {
        items.iter().map(f).collect()
    }

    pub fn for_each_row_mut<F: Fn(usize, &mut [f64])>(m: &mut Array2<f64>, f: F) {
        let cols = m.ncols();
        if cols == 0 {
            return;
        }
        let data = m.as_slice_mut().expect("row-major contiguous matrix required");
        data.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// Dense product `a · b`.
pub fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (m, k, n) = product_shape(a, b);
    if m * k * n < PAR_MIN_WORK || m <= ROW_CHUNK {
        let mut out = Array2::<f64>::zeros((m, n));
        general_mat_mul(1.0, &a, &b, 0.0, &mut out);
        return out;
    }
    #[cfg(feature = "parallel")]
    {
        let mut out = Array2::<f64>::zeros((m, n));
        out.axis_chunks_iter_mut(Axis(0), ROW_CHUNK)
            .into_par_iter()
            .zip(a.axis_chunks_iter(Axis(0), ROW_CHUNK).into_par_iter())
            .for_each(|(mut o, a_rows)| general_mat_mul(1.0, &a_rows, &b, 0.0, &mut o));
        out
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq::matmul(a, b)
    }
}

/// Evaluates `f(i)` for `i in 0..n` and returns the results in index order.
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
        seq::map_indexed(n, f)
    }
}

/// Applies `f` to every item of `items`, returning results in order.
pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq::map_slice(items, f)
    }
}

/// Applies `f(row_index, row)` to each row of `m` in place.
pub fn for_each_row_mut<F>(m: &mut Array2<f64>, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        let cols = m.ncols();
        if cols == 0 {
            return;
        }
        let data = m.as_slice_mut().expect("row-major contiguous matrix required");
        data.par_chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq::for_each_row_mut(m, f)
    }
}

/// Whether this build fans work out over threads.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_product_matches_single_call() {
        let a = Array2::from_shape_fn((300, 40), |(i, j)| ((i * 31 + j * 7) % 17) as f64 - 8.0);
        let b = Array2::from_shape_fn((40, 50), |(i, j)| ((i * 3 + j * 11) % 13) as f64 * 0.25);
        let expected = a.dot(&b);
        assert_eq!(matmul(a.view(), b.view()), expected);
        assert_eq!(seq::matmul(a.view(), b.view()), expected);
    }

    #[test]
    fn map_indexed_keeps_order() {
        let v = map_indexed(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
        assert_eq!(v, seq::map_indexed(100, |i| i * i));
    }

    #[test]
    fn row_updates_match_sequential() {
        let mut a = Array2::from_shape_fn((90, 7), |(i, j)| (i * 7 + j) as f64);
        let mut b = a.clone();
        for_each_row_mut(&mut a, |i, row| row.iter_mut().for_each(|x| *x = x.sqrt() + i as f64));
        seq::for_each_row_mut(&mut b, |i, row| row.iter_mut().for_each(|x| *x = x.sqrt() + i as f64));
        assert_eq!(a, b);
    }
}
