//! Lanczos approximation of `exp(-i H t) ψ` for a Hermitian `H` given only
//! as a matrix-vector product.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone, Copy, Debug)]
pub struct LanczosOptions {
    pub krylov_dim: usize,
    /// Bound on the a-posteriori error estimate per outer step.
    pub tol: f64,
    /// Maximum number of Krylov restarts per outer step.
    pub max_substeps: usize,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            krylov_dim: 24,
            tol: 1e-9,
            max_substeps: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    pub substeps: usize,
    pub matvecs: usize,
    pub error_estimate: f64,
    pub breakdown: bool,
}

/// Tridiagonal projection of `H` onto the Krylov space of a unit vector.
struct KrylovSpace {
    basis: Vec<Vec<C64>>,
    eig: SymmetricEigen<f64, nalgebra::Dyn>,
    /// Off-diagonal element coupling the space to its complement (0 on breakdown).
    beta_next: f64,
}

fn tridiagonal(alpha: &[f64], beta: &[f64]) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let k = alpha.len();
    let mut t = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    SymmetricEigen::new(t)
}

impl KrylovSpace {
    /// Grows the space up to `m` vectors, stopping early once the error
    /// estimate for a step of length `h` is below `target`.
    fn build<F>(apply: &F, start: &[C64], m: usize, h: f64, target: f64, stats: &mut StepStats) -> Self
    where
        F: Fn(&[C64], &mut [C64]),
    {
        let dim = start.len();
        let m = m.min(dim).max(1);
        let mut basis: Vec<Vec<C64>> = Vec::with_capacity(m);
        let mut alpha = Vec::with_capacity(m);
        let mut beta: Vec<f64> = Vec::with_capacity(m);
        basis.push(start.to_vec());
        let mut w = vec![C64::new(0.0, 0.0); dim];
        for j in 0..m {
            apply(&basis[j], &mut w);
            stats.matvecs += 1;
            let a = linalg::dot(&basis[j], &w).re;
            alpha.push(a);
            linalg::axpy(C64::new(-a, 0.0), &basis[j], &mut w);
            if j > 0 {
                linalg::axpy(C64::new(-beta[j - 1], 0.0), &basis[j - 1], &mut w);
            }
            // full reorthogonalization, twice is enough
            for _ in 0..2 {
                for v in &basis {
                    let c = linalg::dot(v, &w);
                    linalg::axpy(-c, v, &mut w);
                }
            }
            let b = linalg::norm(&w);
            let scale = a.abs() + beta.last().copied().unwrap_or(0.0) + 1.0;
            if b <= 1e-13 * scale {
                stats.breakdown = true;
                return Self {
                    basis,
                    eig: tridiagonal(&alpha, &beta),
                    beta_next: 0.0,
                };
            }
            if j >= 3 || j + 1 == m {
                let space = Self {
                    basis: Vec::new(),
                    eig: tridiagonal(&alpha, &beta),
                    beta_next: b,
                };
                if j + 1 == m || space.error_estimate(h) <= target {
                    return Self { basis, ..space };
                }
            }
            beta.push(b);
            let mut next = w.clone();
            linalg::scale(C64::new(1.0 / b, 0.0), &mut next);
            basis.push(next);
        }
        unreachable!("loop returns on its last iteration")
    }

    /// Coefficients of `exp(-i T h) e_1`.
    fn coefficients(&self, h: f64) -> Vec<C64> {
        let q = &self.eig.eigenvectors;
        let k = q.nrows();
        let mut out = vec![C64::new(0.0, 0.0); k];
        for (l, lam) in self.eig.eigenvalues.iter().enumerate() {
            let w = C64::from_polar(q[(0, l)], -lam * h);
            for (i, o) in out.iter_mut().enumerate() {
                *o += w * q[(i, l)];
            }
        }
        out
    }

    fn error_estimate(&self, h: f64) -> f64 {
        if self.beta_next == 0.0 {
            return 0.0;
        }
        let c = self.coefficients(h);
        self.beta_next * c.last().map(|z| z.norm()).unwrap_or(0.0)
    }
}

/// Advances `psi` by `exp(-i H dt)`, restarting the Krylov space with a
/// smaller substep whenever the error estimate exceeds its share of `tol`.
pub fn expm_step<F>(apply: F, psi: &mut [C64], dt: f64, opts: &LanczosOptions) -> Result<StepStats>
where
    F: Fn(&[C64], &mut [C64]),
{
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    if opts.krylov_dim < 4 {
        return Err(Error::InvalidParameter(format!(
            "krylov_dim must be ≥ 4, got {}",
            opts.krylov_dim
        )));
    }
    let mut stats = StepStats::default();
    let mut remaining = dt;
    while remaining > 1e-15 * dt {
        if stats.substeps >= opts.max_substeps {
            return Err(Error::KrylovFailure {
                estimate: stats.error_estimate,
                tol: opts.tol,
                krylov_dim: opts.krylov_dim,
                substeps: stats.substeps,
            });
        }
        let norm = linalg::norm(psi);
        if norm == 0.0 {
            break;
        }
        let mut start = psi.to_vec();
        linalg::scale(C64::new(1.0 / norm, 0.0), &mut start);
        let space = KrylovSpace::build(&apply, &start, opts.krylov_dim, remaining, opts.tol * remaining / dt, &mut stats);
        let mut h = remaining;
        let mut err = space.error_estimate(h);
        let mut halvings = 0;
        while err > opts.tol * h / dt && halvings < 60 {
            h *= 0.5;
            err = space.error_estimate(h);
            halvings += 1;
        }
        if err > opts.tol * h / dt {
            return Err(Error::KrylovFailure {
                estimate: err,
                tol: opts.tol,
                krylov_dim: opts.krylov_dim,
                substeps: stats.substeps,
            });
        }
        let coeff = space.coefficients(h);
        psi.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        for (v, c) in space.basis.iter().zip(&coeff) {
            linalg::axpy(c * norm, v, psi);
        }
        stats.error_estimate = stats.error_estimate.max(err);
        stats.substeps += 1;
        remaining -= h;
    }
    Ok(stats)
}
