use rayon::prelude::*;

/// Chunk size for deterministic parallel reductions.
pub(crate) const CHUNK: usize = 64;

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let max = a.max(b);
    max + ((a - max).exp() + (b - max).exp()).ln()
}

/// Maps fixed-size chunks of `0..n` in parallel and folds the partial
/// results in chunk order, so the floating-point reduction order never
/// depends on the thread schedule.
pub(crate) fn chunked_reduce<A, F, M>(n: usize, chunk: usize, map: F, mut merge: M) -> Option<A>
where
    A: Send,
    F: Fn(std::ops::Range<usize>) -> A + Sync,
    M: FnMut(&mut A, A),
{
    let starts: Vec<usize> = (0..n).step_by(chunk.max(1)).collect();
    let partials: Vec<A> = starts
        .par_iter()
        .map(|&s| map(s..(s + chunk).min(n)))
        .collect();
    let mut iter = partials.into_iter();
    let mut acc = iter.next()?;
    for p in iter {
        merge(&mut acc, p);
    }
    Some(acc)
}
