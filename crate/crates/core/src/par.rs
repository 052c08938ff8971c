//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan out over the rayon global
//! pool; without it they run the same closures sequentially. Results are
//! always collected in index order, so output does not depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum amount of work (multiply-adds) before a kernel is split across threads.
pub const PAR_THRESHOLD: usize = 1 << 15;

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

pub fn map_slice<A, T, F>(items: &[A], f: F) -> Vec<T>
where
    A: Sync,
    T: Send,
    F: Fn(&A) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Apply `f(row_index, row)` to every `cols`-wide row of `data`.
/// Splits across threads only when `work` exceeds [`PAR_THRESHOLD`].
pub fn for_each_row_mut<F>(data: &mut [f64], cols: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if work >= PAR_THRESHOLD {
            data.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work;
    data.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
}

/// True when the crate was built with the `parallel` feature.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
