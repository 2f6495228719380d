//! Ordered reductions used by every estimator.

/// Mean and standard error of the mean, summed in index order.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Standard error of the difference of two means computed on the same paths.
pub fn paired_stderr(xs: &[f64], ys: &[f64]) -> f64 {
    let d: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    mean_stderr(&d).1
}

pub fn combine(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

/// Kish effective sample size of nonnegative weights.
pub fn effective_sample_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}
