//! Periodic spatial grid `[0, L)^d` with spectral (Fourier multiplier)
//! derivatives. The same object supplies the kinetic term for the
//! many-body Hamiltonian and for the effective equations.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

const BATCH: usize = 64;

#[derive(Clone)]
pub struct SpatialGrid {
    dim: usize,
    box_len: f64,
    n_x: usize,
    dx: f64,
    /// Momenta along one axis in FFT order.
    freqs: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SpatialGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpatialGrid")
            .field("dim", &self.dim)
            .field("box_len", &self.box_len)
            .field("n_x", &self.n_x)
            .finish()
    }
}

/// Raw pointer shared across workers that write disjoint lines.
#[derive(Clone, Copy)]
struct LinePtr(*mut C64);
unsafe impl Send for LinePtr {}
unsafe impl Sync for LinePtr {}

impl LinePtr {
    fn at(&self, i: usize) -> *mut C64 {
        self.0.wrapping_add(i)
    }
}

impl SpatialGrid {
    pub fn new(dim: usize, box_len: f64, n_x: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidParameter(format!("dimension must be 1..=3, got {dim}")));
        }
        if n_x < 2 {
            return Err(Error::InvalidParameter("n_x must be ≥ 2".into()));
        }
        if !(box_len > 0.0) || !box_len.is_finite() {
            return Err(Error::InvalidParameter(format!("box length must be > 0, got {box_len}")));
        }
        let dk = 2.0 * PI / box_len;
        let freqs = (0..n_x)
            .map(|i| {
                let m = if i < n_x.div_ceil(2) { i as i64 } else { i as i64 - n_x as i64 };
                m as f64 * dk
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            dim,
            box_len,
            n_x,
            dx: box_len / n_x as f64,
            freqs,
            forward: planner.plan_fft_forward(n_x),
            inverse: planner.plan_fft_inverse(n_x),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn box_len(&self) -> f64 {
        self.box_len
    }

    pub fn points_per_axis(&self) -> usize {
        self.n_x
    }

    pub fn spacing(&self) -> f64 {
        self.dx
    }

    /// `Δx^d`
    pub fn cell_volume(&self) -> f64 {
        self.dx.powi(self.dim as i32)
    }

    /// `n_x^d`
    pub fn nodes(&self) -> usize {
        self.n_x.pow(self.dim as u32)
    }

    pub fn axis_momenta(&self) -> &[f64] {
        &self.freqs
    }

    fn axis_indices(&self, node: usize) -> [usize; 3] {
        let mut idx = [0usize; 3];
        let mut rest = node;
        for a in (0..self.dim).rev() {
            idx[a] = rest % self.n_x;
            rest /= self.n_x;
        }
        idx
    }

    /// Coordinates of `node` (first axis slowest); only `dim` components are used.
    pub fn position(&self, node: usize) -> [f64; 3] {
        self.axis_indices(node).map(|i| i as f64 * self.dx)
    }

    pub fn position_slice(&self, node: usize) -> Vec<f64> {
        self.position(node)[..self.dim].to_vec()
    }

    /// Momentum attached to the DFT index `node` (same ordering as nodes).
    pub fn momentum(&self, node: usize) -> [f64; 3] {
        let idx = self.axis_indices(node);
        let mut k = [0.0; 3];
        for a in 0..self.dim {
            k[a] = self.freqs[idx[a]];
        }
        k
    }

    /// `-|k|²` for DFT index `node`.
    pub fn laplacian_multiplier(&self, node: usize) -> f64 {
        -self.momentum(node).iter().map(|k| k * k).sum::<f64>()
    }

    /// Runs `op` on every line along an axis of a tensor laid out as
    /// `[outer][n_x][stride]`. Lines are gathered into contiguous batches;
    /// `op` receives the batch buffer and an FFT scratch buffer. The result is
    /// written back (or added with coefficient `add` to `dst`).
    fn line_pass<F>(&self, src: &[C64], dst: LinePtr, dst_len: usize, stride: usize, add: Option<C64>, op: F)
    where
        F: Fn(&mut [C64], &mut [C64]) + Sync,
    {
        let n = self.n_x;
        assert_eq!(src.len() % (n * stride), 0, "tensor length is not a multiple of the axis block");
        assert_eq!(src.len(), dst_len);
        let lines = src.len() / n;
        let batches = lines.div_ceil(BATCH);
        let scratch_len = self
            .forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len());
        (0..batches).into_par_iter().for_each(|b| {
            let first = b * BATCH;
            let count = BATCH.min(lines - first);
            let mut buf = vec![C64::new(0.0, 0.0); count * n];
            let mut scratch = vec![C64::new(0.0, 0.0); scratch_len];
            let base = |l: usize| (l / stride) * n * stride + l % stride;
            for (c, line) in buf.chunks_mut(n).enumerate() {
                let start = base(first + c);
                for (i, v) in line.iter_mut().enumerate() {
                    *v = src[start + i * stride];
                }
            }
            op(&mut buf, &mut scratch);
            for (c, line) in buf.chunks(n).enumerate() {
                let start = base(first + c);
                for (i, v) in line.iter().enumerate() {
                    // SAFETY: every line index belongs to exactly one batch and
                    // distinct lines address disjoint elements, so no two
                    // workers touch the same element; `start + i * stride < dst_len`.
                    unsafe {
                        let p = dst.at(start + i * stride);
                        match add {
                            Some(coeff) => *p += coeff * v,
                            None => *p = *v,
                        }
                    }
                }
            }
        });
    }

    fn multiplier_op<'a>(&'a self, mult: &'a [C64]) -> impl Fn(&mut [C64], &mut [C64]) + Sync + 'a {
        let n = self.n_x;
        let inv_n = 1.0 / n as f64;
        move |buf: &mut [C64], scratch: &mut [C64]| {
            self.forward.process_with_scratch(buf, scratch);
            for line in buf.chunks_mut(n) {
                for (v, m) in line.iter_mut().zip(mult) {
                    *v *= m * inv_n;
                }
            }
            self.inverse.process_with_scratch(buf, scratch);
        }
    }

    /// In place: multiply by the 1-D spectral multiplier `mult` (FFT order)
    /// along the axis with the given stride.
    pub fn apply_axis_multiplier(&self, data: &mut [C64], stride: usize, mult: &[C64]) {
        let src = data.to_vec();
        let len = data.len();
        self.line_pass(&src, LinePtr(data.as_mut_ptr()), len, stride, None, self.multiplier_op(mult));
    }

    /// `dst += coeff · M_axis src`
    pub fn add_axis_multiplier(&self, src: &[C64], dst: &mut [C64], stride: usize, mult: &[C64], coeff: C64) {
        let len = dst.len();
        self.line_pass(src, LinePtr(dst.as_mut_ptr()), len, stride, Some(coeff), self.multiplier_op(mult));
    }

    /// `k²` along one axis (the 1-D spectral `-∂²`).
    pub fn neg_second_derivative_multiplier(&self) -> Vec<C64> {
        self.freqs.iter().map(|k| C64::new(k * k, 0.0)).collect()
    }

    /// `i k` along one axis (the 1-D spectral `∂`).
    pub fn derivative_multiplier(&self) -> Vec<C64> {
        self.freqs.iter().map(|k| C64::new(0.0, *k)).collect()
    }

    /// Stride of axis `a` for a single grid function.
    pub fn axis_stride(&self, a: usize) -> usize {
        self.n_x.pow((self.dim - 1 - a) as u32)
    }

    /// `-Δ f` for a grid function.
    pub fn neg_laplacian(&self, f: &[C64]) -> Vec<C64> {
        let mult = self.neg_second_derivative_multiplier();
        let mut out = vec![C64::new(0.0, 0.0); f.len()];
        for a in 0..self.dim {
            self.add_axis_multiplier(f, &mut out, self.axis_stride(a), &mult, C64::new(1.0, 0.0));
        }
        out
    }

    /// Spectral gradient components `∂_a f`.
    pub fn gradient(&self, f: &[C64]) -> Vec<Vec<C64>> {
        let mult = self.derivative_multiplier();
        (0..self.dim)
            .map(|a| {
                let mut g = f.to_vec();
                self.apply_axis_multiplier(&mut g, self.axis_stride(a), &mult);
                g
            })
            .collect()
    }

    fn dft(&self, f: &[C64], plan: &Arc<dyn Fft<f64>>) -> Vec<C64> {
        let mut out = f.to_vec();
        let len = out.len();
        let scale = C64::new((self.nodes() as f64).powf(-0.5), 0.0);
        for a in 0..self.dim {
            let src = out.clone();
            let op = |buf: &mut [C64], scratch: &mut [C64]| plan.process_with_scratch(buf, scratch);
            self.line_pass(&src, LinePtr(out.as_mut_ptr()), len, self.axis_stride(a), None, op);
        }
        out.iter_mut().for_each(|v| *v *= scale);
        out
    }

    /// Unitary d-dimensional DFT; output index `m` carries momentum [`Self::momentum`]`(m)`.
    pub fn fft_unitary(&self, f: &[C64]) -> Vec<C64> {
        self.dft(f, &self.forward)
    }

    pub fn ifft_unitary(&self, f: &[C64]) -> Vec<C64> {
        self.dft(f, &self.inverse)
    }

    /// `Δx^d Σ_x |f|²`
    pub fn l2_norm_sq(&self, f: &[C64]) -> f64 {
        self.cell_volume() * f.iter().map(|z| z.norm_sqr()).sum::<f64>()
    }

    /// `Δx^d Σ_x f* g`
    pub fn inner(&self, f: &[C64], g: &[C64]) -> C64 {
        f.iter().zip(g).map(|(a, b)| a.conj() * b).sum::<C64>() * self.cell_volume()
    }

    /// `Σ_k (1 + |k|²) |f̂(k)|²` for a `Δx^d`-normalized grid function.
    pub fn h1_norm_sq(&self, f: &[C64]) -> f64 {
        let fh = self.fft_unitary(f);
        fh.iter()
            .enumerate()
            .map(|(m, z)| (1.0 - self.laplacian_multiplier(m)) * z.norm_sqr())
            .sum::<f64>()
            * self.cell_volume()
    }

    /// Grid values of a normalized Gaussian centered at `center` with width `width`
    /// (periodized by minimum image), times `e^{i k·x}`.
    pub fn gaussian(&self, center: &[f64], width: f64, momentum: &[f64]) -> Vec<C64> {
        let mut f: Vec<C64> = (0..self.nodes())
            .map(|node| {
                let x = self.position(node);
                let mut r2 = 0.0;
                let mut phase = 0.0;
                for a in 0..self.dim {
                    let mut d = x[a] - center.get(a).copied().unwrap_or(0.0);
                    d -= self.box_len * (d / self.box_len).round();
                    r2 += d * d;
                    phase += momentum.get(a).copied().unwrap_or(0.0) * x[a];
                }
                C64::from_polar((-r2 / (2.0 * width * width)).exp(), phase)
            })
            .collect();
        self.normalize(&mut f);
        f
    }

    /// `e^{i k·x} / √(L^d)` for the lattice momentum `2π j / L`.
    pub fn plane_wave(&self, lattice: &[i64]) -> Vec<C64> {
        let dk = 2.0 * PI / self.box_len;
        let amp = self.box_len.powf(-(self.dim as f64) / 2.0);
        (0..self.nodes())
            .map(|node| {
                let x = self.position(node);
                let phase: f64 = (0..self.dim)
                    .map(|a| lattice.get(a).copied().unwrap_or(0) as f64 * dk * x[a])
                    .sum();
                C64::from_polar(amp, phase)
            })
            .collect()
    }

    pub fn normalize(&self, f: &mut [C64]) {
        let n = self.l2_norm_sq(f).sqrt();
        if n > 0.0 {
            f.iter_mut().for_each(|v| *v /= n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_tiny_grids() {
        let err = SpatialGrid::new(1, 1.0, 1).unwrap_err();
        assert!(err.to_string().contains("n_x must be ≥ 2"));
    }

    #[test]
    fn plane_wave_is_laplacian_eigenfunction() {
        for dim in [1, 3] {
            let g = SpatialGrid::new(dim, 2.0 * PI, 8).unwrap();
            let lattice = [2i64, -1, 3];
            let f = g.plane_wave(&lattice[..dim]);
            assert!((g.l2_norm_sq(&f) - 1.0).abs() < 1e-12);
            let k2: f64 = lattice[..dim].iter().map(|j| (*j * *j) as f64).sum();
            let lf = g.neg_laplacian(&f);
            for (a, b) in lf.iter().zip(&f) {
                assert!((a - b * k2).norm() < 1e-11);
            }
        }
    }

    #[test]
    fn unitary_dft_round_trip_and_parseval() {
        let g = SpatialGrid::new(3, 3.0, 4).unwrap();
        let f: Vec<C64> = (0..g.nodes()).map(|i| C64::new((i as f64).sin(), (i as f64 * 0.3).cos())).collect();
        let fh = g.fft_unitary(&f);
        let back = g.ifft_unitary(&fh);
        assert!(crate::linalg::distance(&f, &back) < 1e-12);
        assert!((crate::linalg::norm_sq(&f) - crate::linalg::norm_sq(&fh)).abs() < 1e-10);
    }

    #[test]
    fn laplacian_multipliers_nonpositive() {
        let g = SpatialGrid::new(1, 5.0, 7).unwrap();
        assert!((0..g.nodes()).all(|m| g.laplacian_multiplier(m) <= 0.0));
        assert_eq!(g.laplacian_multiplier(0), 0.0);
    }
}
