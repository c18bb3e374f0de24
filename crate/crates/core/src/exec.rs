//! Fan-out helper for the crate's data-parallel inner loops.
//!
//! [`map_indexed`] runs a closure over `0..n` using rayon when the `parallel`
//! feature is enabled (the default) and a plain sequential loop otherwise.
//! Output order is always index order, so callers get identical results in
//! both modes; every nondeterministic-looking workload (episode collection,
//! batch gradients, CEM candidate scoring) seeds itself from the index.
//! [`map_indexed_seq`] is the always-sequential variant, kept public so the
//! benchmark suite can compare the two paths directly.

#[cfg(feature = "parallel")]
pub fn map_indexed<R: Send>(n: usize, f: impl Fn(usize) -> R + Send + Sync) -> Vec<R> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<R: Send>(n: usize, f: impl Fn(usize) -> R + Send + Sync) -> Vec<R> {
    map_indexed_seq(n, f)
}

pub fn map_indexed_seq<R: Send>(n: usize, f: impl Fn(usize) -> R + Send + Sync) -> Vec<R> {
    (0..n).map(f).collect()
}
