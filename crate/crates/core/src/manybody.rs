//! The microscopic Nelson model on `(grid)^N ⊗ F_trunc`:
//!
//! `H_N = Σ_j (-Δ_j + Φ̂(x_j)/√N) + H_f`
//!
//! The coefficient array is indexed `[x_1, …, x_N, n]` with `x_1` slowest
//! and the Fock index fastest; each `x_j` is a grid node.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fock::{self, FockBasis, ModeGrid, SparseOperator};
use crate::grid::SpatialGrid;
use crate::krylov::{self, LanczosOptions};
use crate::linalg;

pub const DEFAULT_ORACLE_CAP: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub particles: usize,
    /// Grid nodes per particle, `n_x^d`.
    pub nodes: usize,
    pub fock_dim: usize,
}

impl Layout {
    pub fn spatial(&self) -> usize {
        self.nodes.pow(self.particles as u32)
    }

    pub fn total(&self) -> usize {
        self.spatial() * self.fock_dim
    }

    /// Elements per value of `x_1`.
    pub fn slot_block(&self) -> usize {
        self.total() / self.nodes
    }

    /// Node of particle `p` (0-based) in spatial multi-index `s`.
    pub fn node_of(&self, s: usize, p: usize) -> usize {
        (s / self.nodes.pow((self.particles - 1 - p) as u32)) % self.nodes
    }
}

#[derive(Clone, Debug)]
pub struct ManyBodyState {
    layout: Layout,
    coeffs: Vec<C64>,
    time: f64,
}

impl ManyBodyState {
    pub fn new(layout: Layout, coeffs: Vec<C64>) -> Result<Self> {
        if coeffs.len() != layout.total() {
            return Err(Error::ShapeMismatch(format!(
                "{} coefficients for layout {:?} (expected {})",
                coeffs.len(),
                layout,
                layout.total()
            )));
        }
        Ok(Self {
            layout,
            coeffs,
            time: 0.0,
        })
    }

    pub fn zeros(layout: Layout) -> Self {
        Self {
            layout,
            coeffs: vec![C64::new(0.0, 0.0); layout.total()],
            time: 0.0,
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<C64> {
        self.coeffs
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.time = t;
        self
    }

    pub fn norm_sq(&self) -> f64 {
        linalg::norm_sq(&self.coeffs)
    }

    pub fn normalize(&mut self) {
        let n = self.norm_sq().sqrt();
        if n > 0.0 {
            linalg::scale(C64::new(1.0 / n, 0.0), &mut self.coeffs);
        }
    }

    /// Copy with particle slots `i` and `j` exchanged.
    pub fn swap_particles(&self, i: usize, j: usize) -> Self {
        let l = self.layout;
        let f = l.fock_dim;
        let mut out = vec![C64::new(0.0, 0.0); l.total()];
        let wi = l.nodes.pow((l.particles - 1 - i) as u32);
        let wj = l.nodes.pow((l.particles - 1 - j) as u32);
        for s in 0..l.spatial() {
            let (ni, nj) = (l.node_of(s, i), l.node_of(s, j));
            let t = s - ni * wi - nj * wj + nj * wi + ni * wj;
            out[t * f..(t + 1) * f].copy_from_slice(&self.coeffs[s * f..(s + 1) * f]);
        }
        Self {
            layout: l,
            coeffs: out,
            time: self.time,
        }
    }
}

/// Matrix-free Nelson Hamiltonian.
#[derive(Clone, Debug)]
pub struct NelsonOperator {
    grid: SpatialGrid,
    modes: ModeGrid,
    basis: FockBasis,
    particles: usize,
    /// `Φ̂(x)` for every grid node.
    field_blocks: Vec<SparseOperator>,
    field_energy: Vec<f64>,
    kinetic: Vec<C64>,
}

impl NelsonOperator {
    pub fn new(grid: SpatialGrid, modes: ModeGrid, basis: FockBasis, particles: usize) -> Result<Self> {
        if particles == 0 {
            return Err(Error::InvalidParameter("particle number must be ≥ 1".into()));
        }
        if grid.dim() != modes.dim() {
            return Err(Error::ShapeMismatch(format!(
                "spatial dimension {} vs mode dimension {}",
                grid.dim(),
                modes.dim()
            )));
        }
        if (grid.box_len() - modes.box_len()).abs() > 1e-12 * grid.box_len() {
            return Err(Error::ShapeMismatch(
                "mode lattice must be built on the same box as the spatial grid".into(),
            ));
        }
        if basis.modes() != modes.len() {
            return Err(Error::ModeCountMismatch {
                basis: basis.modes(),
                grid: modes.len(),
            });
        }
        let field_blocks = (0..grid.nodes())
            .into_par_iter()
            .map(|node| fock::field_operator(&modes, &basis, &grid.position_slice(node)))
            .collect::<Result<Vec<_>>>()?;
        let field_energy = fock::field_energies(&basis, &modes);
        let kinetic = grid.neg_second_derivative_multiplier();
        Ok(Self {
            grid,
            modes,
            basis,
            particles,
            field_blocks,
            field_energy,
            kinetic,
        })
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn modes(&self) -> &ModeGrid {
        &self.modes
    }

    pub fn basis(&self) -> &FockBasis {
        &self.basis
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn is_coupled(&self) -> bool {
        self.modes.is_coupled()
    }

    pub fn layout(&self) -> Layout {
        Layout {
            particles: self.particles,
            nodes: self.grid.nodes(),
            fock_dim: self.basis.len(),
        }
    }

    pub fn field_block(&self, node: usize) -> &SparseOperator {
        &self.field_blocks[node]
    }

    /// Stride of spatial axis `a` of particle `p` in the coefficient array.
    pub fn axis_stride(&self, p: usize, a: usize) -> usize {
        let d = self.grid.dim();
        let axes = self.particles * d;
        self.grid.points_per_axis().pow((axes - 1 - (p * d + a)) as u32) * self.basis.len()
    }

    /// `y += s · (-Δ_p) x` for particle `p`.
    pub fn add_kinetic(&self, p: usize, x: &[C64], y: &mut [C64], s: C64) {
        for a in 0..self.grid.dim() {
            self.grid.add_axis_multiplier(x, y, self.axis_stride(p, a), &self.kinetic, s);
        }
    }

    /// `y += s · Φ̂(x_p) x` for particle `p`.
    pub fn add_field(&self, p: usize, x: &[C64], y: &mut [C64], s: C64) {
        let layout = self.layout();
        let f = layout.fock_dim;
        y.par_chunks_mut(f)
            .zip(x.par_chunks(f))
            .enumerate()
            .for_each(|(sidx, (ys, xs))| {
                self.field_blocks[layout.node_of(sidx, p)].apply_add(xs, ys, s);
            });
    }

    /// `y = H_N x` on raw coefficient arrays.
    pub fn apply_raw(&self, x: &[C64], y: &mut [C64]) {
        let layout = self.layout();
        let f = layout.fock_dim;
        let coupling = C64::new(1.0 / (self.particles as f64).sqrt(), 0.0);
        let coupled = self.is_coupled();
        y.par_chunks_mut(f)
            .zip(x.par_chunks(f))
            .enumerate()
            .for_each(|(sidx, (ys, xs))| {
                for ((yi, xi), e) in ys.iter_mut().zip(xs).zip(&self.field_energy) {
                    *yi = xi * e;
                }
                if coupled {
                    for p in 0..self.particles {
                        self.field_blocks[layout.node_of(sidx, p)].apply_add(xs, ys, coupling);
                    }
                }
            });
        for p in 0..self.particles {
            self.add_kinetic(p, x, y, C64::new(1.0, 0.0));
        }
    }

    fn check(&self, psi: &ManyBodyState) -> Result<()> {
        if psi.layout() != self.layout() {
            return Err(Error::ShapeMismatch(format!(
                "state layout {:?} vs operator layout {:?}",
                psi.layout(),
                self.layout()
            )));
        }
        Ok(())
    }

    /// `H_N ψ` (unnormalized).
    pub fn apply(&self, psi: &ManyBodyState) -> Result<ManyBodyState> {
        self.check(psi)?;
        let mut out = ManyBodyState::zeros(psi.layout()).with_time(psi.time());
        self.apply_raw(psi.coeffs(), out.coeffs_mut());
        Ok(out)
    }

    /// `⟨ψ, H_N ψ⟩ / ⟨ψ, ψ⟩`
    pub fn energy(&self, psi: &ManyBodyState) -> Result<f64> {
        let h = self.apply(psi)?;
        Ok(linalg::dot(psi.coeffs(), h.coeffs()).re / psi.norm_sq())
    }
}

pub fn apply_hamiltonian(op: &NelsonOperator, psi: &ManyBodyState) -> Result<ManyBodyState> {
    op.apply(psi)
}

/// `φ₀^{⊗N} ⊗ W(√N α₀) Ω`, with the truncation defect of the coherent factor.
///
/// `phi0` holds grid values with `Δx^d Σ|φ₀|² = 1`.
pub fn product_initial_state(
    phi0: &[C64],
    alpha0: &[C64],
    particles: usize,
    grid: &SpatialGrid,
    basis: &FockBasis,
    tol: f64,
) -> Result<(ManyBodyState, f64)> {
    if phi0.len() != grid.nodes() {
        return Err(Error::ShapeMismatch(format!(
            "orbital has {} values on a grid of {} nodes",
            phi0.len(),
            grid.nodes()
        )));
    }
    if particles == 0 {
        return Err(Error::InvalidParameter("particle number must be ≥ 1".into()));
    }
    let norm_sq = grid.l2_norm_sq(phi0);
    if (norm_sq - 1.0).abs() > 1e-10 {
        return Err(Error::NotNormalized {
            what: "initial orbital",
            norm_sq,
        });
    }
    let sqrt_n = (particles as f64).sqrt();
    let scaled: Vec<C64> = alpha0.iter().map(|a| a * sqrt_n).collect();
    let coherent = fock::coherent_state(basis, &scaled)?;
    if coherent.defect > tol {
        let mean: f64 = scaled.iter().map(|a| a.norm_sqr()).sum();
        return Err(Error::TruncationTooSmall {
            n_max: basis.n_max(),
            defect: coherent.defect,
            tol,
            suggested: fock::required_n_max(mean),
        });
    }
    let slot: Vec<C64> = phi0.iter().map(|v| v * grid.cell_volume().sqrt()).collect();
    let mut coeffs = coherent.state.into_amplitudes();
    for _ in 0..particles {
        let mut next = Vec::with_capacity(coeffs.len() * slot.len());
        for v in &slot {
            next.extend(coeffs.iter().map(|c| v * c));
        }
        coeffs = next;
    }
    let layout = Layout {
        particles,
        nodes: grid.nodes(),
        fock_dim: basis.len(),
    };
    Ok((ManyBodyState::new(layout, coeffs)?, coherent.defect))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PropagationReport {
    pub steps: usize,
    pub matvecs: usize,
    pub max_norm_drift: f64,
    pub max_error_estimate: f64,
    pub energy_initial: f64,
    pub energy_final: f64,
}

impl PropagationReport {
    pub fn energy_drift(&self) -> f64 {
        (self.energy_final - self.energy_initial).abs()
    }
}

/// Applies `exp(-i H_N dt)` `steps` times by Lanczos.
pub fn propagate(
    op: &NelsonOperator,
    psi: &ManyBodyState,
    dt: f64,
    steps: usize,
    krylov_dim: usize,
    tol: f64,
) -> Result<(ManyBodyState, PropagationReport)> {
    op.check(psi)?;
    let opts = LanczosOptions {
        krylov_dim,
        tol,
        ..Default::default()
    };
    let mut state = psi.clone();
    let mut report = PropagationReport {
        energy_initial: op.energy(psi)?,
        ..Default::default()
    };
    let mut norm = state.norm_sq().sqrt();
    for _ in 0..steps {
        let stats = krylov::expm_step(|x, y| op.apply_raw(x, y), state.coeffs_mut(), dt, &opts)?;
        let next = state.norm_sq().sqrt();
        report.max_norm_drift = report.max_norm_drift.max((next - norm).abs());
        report.max_error_estimate = report.max_error_estimate.max(stats.error_estimate);
        report.matvecs += stats.matvecs;
        report.steps += 1;
        norm = next;
        state.time += dt;
    }
    report.energy_final = op.energy(&state)?;
    Ok((state, report))
}

/// Dense matrix of `H_N` assembled column by column from the matrix-free
/// product, with its eigendecomposition.
pub struct DenseOracle {
    matrix: DMatrix<C64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<C64>,
}

impl DenseOracle {
    pub fn new(op: &NelsonOperator) -> Result<Self> {
        Self::with_cap(op, DEFAULT_ORACLE_CAP)
    }

    pub fn with_cap(op: &NelsonOperator, cap: usize) -> Result<Self> {
        let dim = op.layout().total();
        if dim > cap {
            return Err(Error::DimensionAboveCap { dim, cap });
        }
        let columns: Vec<Vec<C64>> = (0..dim)
            .map(|i| {
                let mut e = vec![C64::new(0.0, 0.0); dim];
                e[i] = C64::new(1.0, 0.0);
                let mut col = vec![C64::new(0.0, 0.0); dim];
                op.apply_raw(&e, &mut col);
                col
            })
            .collect();
        let matrix = DMatrix::from_fn(dim, dim, |r, c| columns[c][r]);
        let herm = (&matrix + matrix.adjoint()) * C64::new(0.5, 0.0);
        let eig = SymmetricEigen::new(herm);
        Ok(Self {
            matrix,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn ground_energy(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `exp(-i H t) ψ` via the eigendecomposition.
    pub fn propagate(&self, psi: &[C64], t: f64) -> Vec<C64> {
        let v = DVector::from_column_slice(psi);
        let mut c = self.eigenvectors.adjoint() * v;
        for (ci, lam) in c.iter_mut().zip(self.eigenvalues.iter()) {
            *ci *= C64::from_polar(1.0, -lam * t);
        }
        (&self.eigenvectors * c).as_slice().to_vec()
    }
}
