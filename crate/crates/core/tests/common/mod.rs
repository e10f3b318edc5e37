#![allow(dead_code)]

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Checks `mean(after) ≤ r · mean(before) + 3·SE` on the paired differences
/// `after − r·before`. Returns the slack (nonnegative when it holds).
pub fn paired_contraction(before: &[f64], after: &[f64], r: f64) -> f64 {
    let diffs: Vec<f64> = before.iter().zip(after).map(|(b, a)| a - r * b).collect();
    let (m, se) = mean_se(&diffs);
    3.0 * se - m
}
