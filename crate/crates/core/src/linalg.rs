//! Small dense linear-algebra helpers shared by the generators and oracles.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Smallest eigenvalue of the symmetric part `(M + Mᵀ)/2`.
pub fn min_sym_eigenvalue(m: &Matrix) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Solves `m x = rhs` by LU with partial pivoting.
pub fn solve(m: &Matrix, rhs: &Vector) -> Result<Vector> {
    m.clone()
        .lu()
        .solve(rhs)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Numerical(format!("singular {}x{} system", m.nrows(), m.ncols())))
}

/// Squared Euclidean distance without allocating.
pub fn dist_sq(a: &Vector, b: &Vector) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Arithmetic mean of a non-empty list of vectors, summed in index order and
/// scaled once so that equal inputs give bit-equal results everywhere.
pub fn mean_of<'a, I>(vectors: I, dim: usize) -> Vector
where
    I: IntoIterator<Item = &'a Vector>,
{
    let mut sum = Vector::zeros(dim);
    let mut count = 0usize;
    for v in vectors {
        sum += v;
        count += 1;
    }
    sum / count as f64
}

pub(crate) fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}
