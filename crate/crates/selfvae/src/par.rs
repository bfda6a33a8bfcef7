//! Data-parallel loop helpers.
//!
//! With the `parallel` feature (default) these fan out over rayon's pool;
//! without it they run sequentially. Both paths produce bit-identical
//! results: parallelism is only ever across independent output slots, and
//! every per-slot reduction runs in a fixed sequential order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of output elements before fanning out is worth it.
const PAR_THRESHOLD: usize = 4096;

/// Apply `f` to each fixed-size chunk of `out`, indexed by chunk number.
pub fn for_each_chunk<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    {
        if out.len() >= PAR_THRESHOLD {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Elementwise map over a slice, preserving order.
pub fn map_slice<F>(x: &[f64], f: F) -> Vec<f64>
where
    F: Fn(f64) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if x.len() >= PAR_THRESHOLD {
            return x.par_iter().map(|&v| f(v)).collect();
        }
    }
    x.iter().map(|&v| f(v)).collect()
}

/// Map `0..n` to a vector, preserving index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n >= 8 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Deterministic pairwise sum. Splitting at n/2 keeps the reduction tree
/// fixed, so concatenating a slice with itself exactly doubles the sum.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        let mut s = 0.0;
        for &x in v {
            s += x;
        }
        s
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_doubles_exactly_on_duplication() {
        let v: Vec<f64> = (0..37).map(|i| (i as f64).sin() * 1e3).collect();
        let mut doubled = v.clone();
        doubled.extend_from_slice(&v);
        assert_eq!(pairwise_sum(&doubled), 2.0 * pairwise_sum(&v));
    }

    #[test]
    fn chunk_and_map_match_sequential_order() {
        let mut out = vec![0.0; 12];
        for_each_chunk(&mut out, 3, |i, c| c.fill(i as f64));
        assert_eq!(out[0], 0.0);
        assert_eq!(out[11], 3.0);
        let v = map_indexed(5, |i| i * i);
        assert_eq!(v, vec![0, 1, 4, 9, 16]);
    }
}
