//! Summation and softmax helpers shared by the analysis modules.

const PAIRWISE_BLOCK: usize = 128;

/// Pairwise (cascade) summation. Error grows as O(log n) instead of O(n),
/// and the result depends only on the input order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise sum of `f(i)` for `i in 0..n`, without materializing the terms.
pub fn pairwise_sum_by(n: usize, f: &impl Fn(usize) -> f64) -> f64 {
    fn go(lo: usize, hi: usize, f: &impl Fn(usize) -> f64) -> f64 {
        if hi - lo <= PAIRWISE_BLOCK {
            return (lo..hi).map(f).sum();
        }
        let mid = lo + (hi - lo) / 2;
        go(lo, mid, f) + go(mid, hi, f)
    }
    go(0, n, f)
}

/// log Σ exp(x_i), stable for any finite inputs.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(values: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(values);
    values.iter().map(|v| v - lse).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
