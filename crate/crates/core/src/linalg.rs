//! Small dense helpers for d×d blocks stored row-major in flat slices.

use nalgebra::{DMatrix, SymmetricEigen};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `out += m · v` for a row-major d×d block.
#[inline]
pub fn matvec_add(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (p, o) in out.iter_mut().enumerate() {
        *o += dot(&m[p * d..(p + 1) * d], v);
    }
}

/// `out += mᵀ · v` for a row-major d×d block.
#[inline]
pub fn matvec_t_add(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (p, &vp) in v.iter().enumerate() {
        for q in 0..d {
            out[q] += m[p * d + q] * vp;
        }
    }
}

/// `⟨m a, b⟩` for a row-major d×d block.
#[inline]
pub fn bilinear(m: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let d = a.len();
    let mut s = 0.0;
    for p in 0..d {
        s += b[p] * dot(&m[p * d..(p + 1) * d], a);
    }
    s
}

pub fn identity(d: usize, scale: f64) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for p in 0..d {
        m[p * d + p] = scale;
    }
    m
}

/// Spectral norm of a (not necessarily symmetric) d×d block.
pub fn spectral_norm(m: &[f64], d: usize) -> f64 {
    if d == 1 {
        return m[0].abs();
    }
    let a = DMatrix::from_row_slice(d, d, m);
    a.singular_values().max()
}

/// Extreme eigenvalues (min, max) of the symmetric part of a square matrix.
pub fn sym_eig_range(a: &DMatrix<f64>) -> (f64, f64) {
    if a.nrows() == 0 {
        return (0.0, 0.0);
    }
    let s = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(s);
    (eig.eigenvalues.min(), eig.eigenvalues.max())
}

/// Logarithmic 2-norm: largest eigenvalue of the symmetric part.
pub fn log_norm(a: &DMatrix<f64>) -> f64 {
    sym_eig_range(a).1
}
