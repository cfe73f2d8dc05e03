//! Indexed map helpers: rayon-backed when the `parallel` feature is on,
//! plain iteration otherwise. Output order always follows the index, so
//! results are identical either way.

/// Map `f` over `0..n`, preserving index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, preserving index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    map_indexed_seq(n, f)
}

/// Sequential reference path; the benchmark suite compares this against
/// the parallel path on identical workloads.
pub fn map_indexed_seq<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}
