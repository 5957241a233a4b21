//! Small numeric helpers shared across modules.

/// Pairwise (tree-shaped) summation. Error grows like O(log n) in the
/// number of terms instead of O(n), and the reduction tree is a fixed
/// function of the slice length, so results do not depend on thread
/// count when callers collect into index order first.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Pairwise sum of `f` mapped over `0..n` without materializing a vector.
pub fn pairwise_sum_by<F: Fn(usize) -> f64 + Copy>(n: usize, f: F) -> f64 {
    fn rec<F: Fn(usize) -> f64 + Copy>(lo: usize, hi: usize, f: F) -> f64 {
        match hi - lo {
            0 => 0.0,
            1 => f(lo),
            2 => f(lo) + f(lo + 1),
            _ => {
                let mid = lo + (hi - lo) / 2;
                rec(lo, mid, f) + rec(mid, hi, f)
            }
        }
    }
    rec(0, n, f)
}

/// l1 distance between two equal-length vectors.
pub fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    pairwise_sum_by(a.len(), |i| (a[i] - b[i]).abs())
}
