//! Chunked data-parallel execution with a deterministic sequential fallback.
//!
//! Work is always split into the same fixed-size chunks and results are
//! returned in chunk order, so reductions performed by callers give
//! bit-identical results for any worker count. Building without the
//! `parallel` feature (or selecting [`ExecMode::Sequential`] at runtime)
//! runs the chunks on the calling thread.

use std::ops::Range;
use std::sync::atomic::{AtomicBool, Ordering};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "KINEFUSE_THREADS";

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Parallel,
    Sequential,
}

/// Selects the execution strategy for subsequent calls in this process.
pub fn set_mode(mode: ExecMode) {
    FORCE_SEQUENTIAL.store(mode == ExecMode::Sequential, Ordering::Relaxed);
}

pub fn mode() -> ExecMode {
    if cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed) {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

/// Sizes the global worker pool from `KINEFUSE_THREADS` if set. Safe to call
/// more than once; only the first call has an effect.
pub fn init_threads_from_env() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk))
        .map(|i| i * chunk..((i + 1) * chunk).min(n))
        .collect()
}

/// Applies `f` to consecutive index ranges of length `chunk` covering
/// `0..n`, returning the results in range order.
pub fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let ranges = chunk_ranges(n, chunk);
    match mode() {
        ExecMode::Sequential => ranges.into_iter().map(f).collect(),
        ExecMode::Parallel => par_map(ranges, f),
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, F>(ranges: Vec<Range<usize>>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    use rayon::prelude::*;
    ranges.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, F>(ranges: Vec<Range<usize>>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    ranges.into_iter().map(f).collect()
}

/// Maps every index independently, preserving order.
pub fn map_indexed<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_chunks(n, chunk, |r| r.map(&f).collect::<Vec<_>>())
        .into_iter()
        .flatten()
        .collect()
}

/// Element-wise `acc += x`.
pub fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_input_in_order() {
        let r = chunk_ranges(10, 4);
        assert_eq!(r, vec![0..4, 4..8, 8..10]);
        assert!(chunk_ranges(0, 4).is_empty());
    }

    #[test]
    fn modes_agree_bitwise() {
        let f = |r: Range<usize>| r.map(|i| (i as f64).sqrt().sin()).sum::<f64>();
        set_mode(ExecMode::Sequential);
        let a: f64 = map_chunks(1000, 37, f).iter().sum();
        set_mode(ExecMode::Parallel);
        let b: f64 = map_chunks(1000, 37, f).iter().sum();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(map_indexed(5, 2, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
