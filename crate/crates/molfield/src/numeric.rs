//! Numeric helpers with fixed reduction order.
//!
//! Pooling reductions sort their inputs by total order before summing, so
//! the result is bit-identical under any permutation of the rows being
//! pooled. This is what lets token pooling be exactly permutation
//! invariant rather than merely close.

use ndarray::{Array1, Array2};

/// Sum of a slice, accumulated in value-sorted order.
pub fn stable_sum(values: &mut Vec<f64>) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Column-wise mean of a matrix, permutation invariant over rows.
pub fn stable_mean_rows(x: &Array2<f64>) -> Array1<f64> {
    let (n, d) = x.dim();
    assert!(n > 0, "mean of empty matrix");
    let mut out = Array1::zeros(d);
    let mut scratch = Vec::with_capacity(n);
    for j in 0..d {
        scratch.clear();
        scratch.extend(x.column(j).iter().copied());
        out[j] = stable_sum(&mut scratch) / n as f64;
    }
    out
}

/// Column-wise mean over a subset of rows, permutation invariant.
pub fn stable_mean_rows_subset(x: &Array2<f64>, rows: &[usize]) -> Array1<f64> {
    let d = x.ncols();
    assert!(!rows.is_empty(), "mean of empty row subset");
    let mut out = Array1::zeros(d);
    let mut scratch = Vec::with_capacity(rows.len());
    for j in 0..d {
        scratch.clear();
        scratch.extend(rows.iter().map(|&i| x[[i, j]]));
        out[j] = stable_sum(&mut scratch) / rows.len() as f64;
    }
    out
}

pub fn relative_error(got: f64, want: f64) -> f64 {
    let denom = want.abs().max(1e-300);
    (got - want).abs() / denom
}
