//! Small dense linear-algebra helpers shared by the GP and acquisition code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Number of ×10 jitter escalations attempted after the base jitter fails.
pub const JITTER_ESCALATIONS: usize = 3;

/// Cholesky factorization of `m + jitter·I`, escalating the jitter ×10 up to
/// [`JITTER_ESCALATIONS`] times. Returns the factor and the jitter that worked.
pub fn cholesky_with_jitter(
    m: &DMatrix<f64>,
    base_jitter: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = base_jitter;
    for attempt in 0..=JITTER_ESCALATIONS {
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(a) {
            return Ok((chol, jitter));
        }
        if attempt < JITTER_ESCALATIONS {
            jitter *= 10.0;
        }
    }
    Err(Error::IllConditioned { jitter })
}

/// Solves `m x = b` for a symmetric PSD `m`, regularizing with escalating jitter.
pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = m.diagonal().amax().max(f64::MIN_POSITIVE);
    let (chol, _) = cholesky_with_jitter(m, 1e-12 * scale)?;
    Ok(chol.solve(b))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    SymmetricEigen::new(s)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Spectral radius of a general square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Population mean and variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
