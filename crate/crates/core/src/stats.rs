//! Small statistics helpers: energy distance and windowed trace variance.

use crate::scalar::Scalar;

pub fn mean<S: Scalar>(xs: &[S]) -> S {
    if xs.is_empty() {
        return S::zero();
    }
    xs.iter().copied().sum::<S>() / S::from_usize(xs.len()).unwrap()
}

/// Population variance.
pub fn variance<S: Scalar>(xs: &[S]) -> S {
    if xs.is_empty() {
        return S::zero();
    }
    let m = mean(xs);
    xs.iter().map(|x| (*x - m) * (*x - m)).sum::<S>() / S::from_usize(xs.len()).unwrap()
}

fn mean_pairwise_distance<S: Scalar>(a: &[Vec<S>], b: &[Vec<S>]) -> S {
    let mut total = S::zero();
    for x in a {
        for y in b {
            total += crate::linalg::distance(x, y);
        }
    }
    total / S::from_usize(a.len() * b.len()).unwrap()
}

/// Two-sample energy distance `sqrt(2 E|X-Y| - E|X-X'| - E|Y-Y'|)`.
pub fn energy_distance<S: Scalar>(a: &[Vec<S>], b: &[Vec<S>]) -> S {
    assert!(!a.is_empty() && !b.is_empty());
    let two = S::from_f64_c(2.0);
    let d = two * mean_pairwise_distance(a, b)
        - mean_pairwise_distance(a, a)
        - mean_pairwise_distance(b, b);
    d.max(S::zero()).sqrt()
}

/// Mean over all stride-1 windows of the trace variance (sum of per-dimension
/// population variances) of a vector-valued series.
pub fn sliding_window_trace_variance<S: Scalar>(series: &[Vec<S>], window: usize) -> Option<S> {
    if window < 2 || series.len() < window {
        return None;
    }
    let dim = series[0].len();
    let n = series.len();
    // prefix sums of x and x^2 per dimension
    let mut ps = vec![vec![S::zero(); dim]; n + 1];
    let mut ps2 = vec![vec![S::zero(); dim]; n + 1];
    for (i, row) in series.iter().enumerate() {
        for d in 0..dim {
            ps[i + 1][d] = ps[i][d] + row[d];
            ps2[i + 1][d] = ps2[i][d] + row[d] * row[d];
        }
    }
    let w = S::from_usize(window).unwrap();
    let mut total = S::zero();
    let count = n - window + 1;
    for start in 0..count {
        let end = start + window;
        let mut tv = S::zero();
        for d in 0..dim {
            let s1 = ps[end][d] - ps[start][d];
            let s2 = ps2[end][d] - ps2[start][d];
            let m = s1 / w;
            tv += s2 / w - m * m;
        }
        total += tv.max(S::zero());
    }
    Some(total / S::from_usize(count).unwrap())
}
