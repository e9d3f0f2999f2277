//! Data-parallel iteration helpers.
//!
//! With the `parallel` feature (default) these run on the rayon thread pool;
//! without it they fall back to plain sequential iteration so the crate builds
//! with no rayon dependency at all.
//!
//! Every helper maps independent inputs to independent outputs. There are no
//! parallel reductions anywhere in the crate: reductions happen sequentially
//! over the collected results, in index order, so results are bit-identical
//! regardless of thread count or feature selection. The training determinism
//! and resumability guarantees depend on this.

/// True when the crate was built with the rayon-backed implementation.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Map over `0..count`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..count).map(f).collect()
}

/// Map over a slice, collecting results in input order.
#[cfg(feature = "parallel")]
pub fn par_map_slice<T, U, F>(data: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    data.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_slice<T, U, F>(data: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    data.iter().map(f).collect()
}

/// Always-sequential map over `0..count`. Exists so benchmarks can compare
/// the parallel path against the identical sequential workload within one
/// compiled binary.
pub fn seq_map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..count).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexed_map_preserves_order() {
        let out = par_map_indexed(100, |i| i * 3);
        assert_eq!(out, (0..100).map(|i| i * 3).collect::<Vec<_>>());
    }

    #[test]
    fn slice_map_matches_sequential() {
        let data: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let par = par_map_slice(&data, |x| x.sin());
        let seq: Vec<f64> = data.iter().map(|x| x.sin()).collect();
        assert_eq!(par, seq);
    }
}
