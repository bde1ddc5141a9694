//! Deterministic data-parallel reductions.
//!
//! Work is split into fixed-size chunks whose partial results are merged
//! in chunk order. The chunking does not depend on the thread count, so
//! the `parallel` feature and the sequential fallback produce bitwise
//! identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Items per chunk.
pub const CHUNK: usize = 64;

/// Sum of `f(i)` for `i in 0..n`.
pub fn sum(n: usize, f: impl Fn(usize) -> f64 + Sync + Send) -> f64 {
    fold(n, || 0.0, |acc, i| *acc += f(i), |acc, part| *acc += part)
}

/// Chunked fold: `fold_item` within a chunk, `merge` across chunks in order.
pub fn fold<A, I, F, M>(n: usize, init: I, fold_item: F, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize) + Sync + Send,
    M: Fn(&mut A, A),
{
    let chunks = n.div_ceil(CHUNK);
    let run = |c: usize| {
        let mut acc = init();
        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
            fold_item(&mut acc, i);
        }
        acc
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<A> = (0..chunks).into_par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<A> = (0..chunks).map(run).collect();

    let mut total = init();
    for part in parts {
        merge(&mut total, part);
    }
    total
}

/// `(0..n).map(f).collect()`, in parallel when enabled. Output order is
/// always the index order.
pub fn map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_matches_sequential_chunking() {
        let f = |i: usize| 1.0 / (1.0 + i as f64).powf(1.3);
        let n: usize = 1_000;
        let mut expect = 0.0;
        for c in 0..n.div_ceil(CHUNK) {
            let mut part = 0.0;
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                part += f(i);
            }
            expect += part;
        }
        assert_eq!(sum(n, f).to_bits(), expect.to_bits());
        assert_eq!(sum(0, f), 0.0);
    }

    #[test]
    fn map_preserves_order() {
        assert_eq!(map(5, |i| i * 2), vec![0, 2, 4, 6, 8]);
    }
}
