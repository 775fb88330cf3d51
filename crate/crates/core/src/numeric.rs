//! Summation primitives and the shared worker pool.
//!
//! Every reduction in the crate goes through [`pairwise_sum_by`] so that the
//! summation order is a fixed function of the length alone. Pairwise
//! summation of non-negative terms is monotone in each term under IEEE
//! rounding, which the solver relies on for its exact ordering checks.

use std::sync::OnceLock;

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

const BLOCK: usize = 8;

const EXP_UNDERFLOW: f64 = -746.0;

/// Products `rows * cols` at or above this size are evaluated in parallel.
pub const PARALLEL_THRESHOLD: usize = 65_536;

/// Pairwise sum of `f(0) + ... + f(n-1)`.
pub fn pairwise_sum_by<F: Fn(usize) -> f64>(n: usize, f: &F) -> f64 {
    sum_range(0, n, f)
}

fn sum_range<F: Fn(usize) -> f64>(lo: usize, hi: usize, f: &F) -> f64 {
    let len = hi - lo;
    if len <= BLOCK {
        let mut acc = 0.0;
        for i in lo..hi {
            acc += f(i);
        }
        acc
    } else {
        let mid = lo + len / 2;
        sum_range(lo, mid, f) + sum_range(mid, hi, f)
    }
}

pub fn pairwise_sum(values: &[f64]) -> f64 {
    pairwise_sum_by(values.len(), &|i| values[i])
}

pub fn pairwise_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    pairwise_sum_by(a.len(), &|i| a[i] * b[i])
}

/// `ln(sum exp(f(i)))` with a max shift. Returns `-inf` when every term is
/// `-inf` (an empty or all-zero sum).
pub fn log_sum_exp_by<F: Fn(usize) -> f64>(n: usize, f: &F) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for i in 0..n {
        let v = f(i);
        if v > m {
            m = v;
        }
    }
    if m == f64::NEG_INFINITY {
        return m;
    }
    if !m.is_finite() {
        return m;
    }
    // exp underflows to exactly zero below this, so skipping the call is exact.
    let s = pairwise_sum_by(n, &|i| {
        let d = f(i) - m;
        if d < EXP_UNDERFLOW {
            0.0
        } else {
            d.exp()
        }
    });
    m + s.ln()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    log_sum_exp_by(values.len(), &|i| values[i])
}

/// `ln x` with `ln 0 = -inf`; negative inputs map to NaN as usual.
pub fn ln0(x: f64) -> f64 {
    if x == 0.0 {
        f64::NEG_INFINITY
    } else {
        x.ln()
    }
}

/// Pool used for row-parallel kernel products. The thread count is capped by
/// `FORTET_THREADS` when that variable holds a positive integer.
pub fn pool() -> &'static ThreadPool {
    static POOL: OnceLock<ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut b = ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("FORTET_THREADS")
            .ok()
            .and_then(|s| s.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            b = b.num_threads(n);
        }
        b.build().expect("failed to build worker pool")
    })
}

/// Evaluates `f(row)` for every row, in parallel when `work` is large.
/// Each row is computed independently, so the result does not depend on the
/// thread count.
pub fn map_rows<F>(rows: usize, work: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    if work >= PARALLEL_THRESHOLD && rows > 1 {
        pool().install(|| (0..rows).into_par_iter().with_min_len(8).map(&f).collect())
    } else {
        (0..rows).map(f).collect()
    }
}
