//! Data-parallel iteration helpers.
//!
//! Every parallel loop in the crate assigns each worker a disjoint output
//! region and performs no cross-worker accumulation, so results are bitwise
//! identical to the sequential fallback. The `parallel` cargo feature selects
//! the rayon implementation at compile time; `set_sequential(true)` disables
//! it at run time (used by benchmarks to measure both paths in one binary).

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Runtime switch: when true, all helpers below run on the calling thread.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

pub fn is_sequential() -> bool {
    !cfg!(feature = "parallel") || FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Splits `data` into `chunk`-sized slabs and applies `f(slab_index, slab)`
/// to each. Slabs are disjoint, so the parallel and sequential paths perform
/// the identical per-slab computation.
pub fn for_each_slab<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0 && data.len() % chunk == 0, "slab size must tile the buffer");
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, s)| f(i, s));
            return;
        }
    }
    for (i, s) in data.chunks_mut(chunk).enumerate() {
        f(i, s);
    }
}

/// Like `for_each_slab` but the final chunk may be shorter.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, s)| f(i, s));
            return;
        }
    }
    for (i, s) in data.chunks_mut(chunk).enumerate() {
        f(i, s);
    }
}

/// Maps `f` over `0..n` collecting results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slab_iteration_covers_disjoint_regions() {
        let mut buf = vec![0usize; 12];
        for_each_slab(&mut buf, 3, |i, s| {
            for x in s.iter_mut() {
                *x = i + 1;
            }
        });
        assert_eq!(buf, vec![1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]);
    }

    #[test]
    fn sequential_switch_gives_identical_results() {
        let run = |seq: bool| {
            set_sequential(seq);
            let mut buf = vec![0.0f64; 64];
            for_each_slab(&mut buf, 8, |i, s| {
                for (j, x) in s.iter_mut().enumerate() {
                    *x = ((i * 31 + j) as f64).sin();
                }
            });
            set_sequential(false);
            buf
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn map_indexed_preserves_order() {
        assert_eq!(map_indexed(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
