//! Vector kernels and dense Hermitian helpers shared by the solvers.
//!
//! Reductions are split into fixed-size chunks and combined sequentially, so
//! results are bitwise identical for any rayon pool size.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{Error, Result};

const CHUNK: usize = 1 << 13;

/// `⟨u, v⟩`, antilinear in `u`.
pub fn dot(u: &[C64], v: &[C64]) -> C64 {
    debug_assert_eq!(u.len(), v.len());
    if u.len() <= CHUNK {
        return u.iter().zip(v).map(|(a, b)| a.conj() * b).sum();
    }
    let partial: Vec<C64> = u
        .par_chunks(CHUNK)
        .zip(v.par_chunks(CHUNK))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.conj() * y).sum())
        .collect();
    partial.into_iter().sum()
}

pub fn norm_sq(u: &[C64]) -> f64 {
    if u.len() <= CHUNK {
        return u.iter().map(|a| a.norm_sqr()).sum();
    }
    let partial: Vec<f64> = u
        .par_chunks(CHUNK)
        .map(|a| a.iter().map(|x| x.norm_sqr()).sum())
        .collect();
    partial.into_iter().sum()
}

pub fn norm(u: &[C64]) -> f64 {
    norm_sq(u).sqrt()
}

/// `y += a x`
pub fn axpy(a: C64, x: &[C64], y: &mut [C64]) {
    y.par_iter_mut()
        .with_min_len(CHUNK)
        .zip(x.par_iter().with_min_len(CHUNK))
        .for_each(|(yi, xi)| *yi += a * xi);
}

pub fn scale(a: C64, x: &mut [C64]) {
    x.par_iter_mut().with_min_len(CHUNK).for_each(|xi| *xi *= a);
}

pub fn distance(u: &[C64], v: &[C64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Largest entry of `|A - A†|`.
pub fn hermiticity_defect(a: &DMatrix<C64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Eigenvalues of a Hermitian matrix (ascending).
pub fn hermitian_eigenvalues(a: &DMatrix<C64>) -> DVector<f64> {
    let mut ev = a.clone().symmetric_eigenvalues();
    let v = ev.as_mut_slice();
    v.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// Trace norm `Σ|λ|` of a Hermitian matrix. Rejects inputs whose
/// anti-Hermitian part exceeds `1e-10`.
pub fn trace_norm(a: &DMatrix<C64>) -> Result<f64> {
    if a.nrows() != a.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "trace norm of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let deviation = hermiticity_defect(a);
    if deviation > 1e-10 {
        return Err(Error::NotHermitian { deviation });
    }
    let sym = (a + a.adjoint()) * C64::new(0.5, 0.0);
    Ok(hermitian_eigenvalues(&sym).iter().map(|l| l.abs()).sum())
}

/// Hilbert-Schmidt norm.
pub fn hs_norm(a: &DMatrix<C64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn trace(a: &DMatrix<C64>) -> C64 {
    (0..a.nrows().min(a.ncols())).map(|i| a[(i, i)]).sum()
}
