//! Seed-average statistics used by the experiment aggregation and the statistical checks.

/// Sample mean and standard error of the mean (zero for a single sample).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Result of testing `mean(after) ≤ r · mean(before) + 3·SE` on paired samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contraction {
    /// `mean(after) / mean(before)`.
    pub ratio: f64,
    /// Three standard errors of `after − r·before`, in ratio units.
    pub allowance: f64,
    pub holds: bool,
}

pub fn paired_contraction(before: &[f64], after: &[f64], r: f64) -> Contraction {
    let diffs: Vec<f64> = before.iter().zip(after).map(|(b, a)| a - r * b).collect();
    let (m, se) = mean_se(&diffs);
    let (mb, _) = mean_se(before);
    let (ma, _) = mean_se(after);
    Contraction {
        ratio: ma / mb,
        allowance: 3.0 * se / mb,
        holds: m <= 3.0 * se,
    }
}
