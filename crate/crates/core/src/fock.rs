//! Truncated bosonic Fock space over a finite set of field modes.
//!
//! Field momenta live on the lattice `k = 2πj/L` of the periodic box, so
//! continuum integrals `∫dk` become `Σ_j Δk^d`. Ladder operators are
//! dimensionless, `[a_i, a†_j] = δ_ij`; the continuum `a(k)` corresponds to
//! `a_j / √(Δk^d)`. The creator is defined as the adjoint of the annihilator
//! on the truncated space, so every operator built here is exactly Hermitian
//! and the CCR only fails on the top sector `Σn = n_max`.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_MAX_FOCK_DIM: usize = 1 << 22;
const NO_INDEX: u32 = u32::MAX;

/// One lattice field mode.
#[derive(Clone, Debug, Serialize)]
pub struct Mode {
    /// Integer multi-index `j` (unused components are zero).
    pub lattice: [i64; 3],
    pub k: [f64; 3],
    pub omega: f64,
    /// `g = √(Δk^d) (2π)^{-d/2} / √(2ω)`
    pub form_factor: f64,
    /// `θ = g k`
    pub theta: [f64; 3],
}

impl Mode {
    pub fn k_norm_sq(&self) -> f64 {
        self.k.iter().map(|k| k * k).sum()
    }

    /// `k · x` for a position with `d` components.
    pub fn phase(&self, x: &[f64]) -> f64 {
        self.k.iter().zip(x).map(|(k, x)| k * x).sum()
    }
}

/// Discretized field momenta `|k| ≤ Λ` with dispersion and form factors.
#[derive(Clone, Debug)]
pub struct ModeGrid {
    dim: usize,
    box_len: f64,
    cutoff: f64,
    mass: f64,
    dk: f64,
    modes: Vec<Mode>,
    partner: Vec<usize>,
    coupled: bool,
}

/// Δk^d-weighted norms of the cutoff functions `κ̃`, `η̃ = κ̃/√(2ω)` and `Θ̃ = η̃ k`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CutoffNorms {
    pub kappa_sq: f64,
    pub eta_sq: f64,
    pub theta_sq: f64,
}

impl ModeGrid {
    pub fn new(dim: usize, box_len: f64, cutoff: f64, mass: f64) -> Result<Self> {
        if dim != 1 && dim != 3 {
            return Err(Error::InvalidParameter(format!(
                "dimension must be 1 or 3, got {dim}"
            )));
        }
        if !(box_len > 0.0) || !box_len.is_finite() {
            return Err(Error::InvalidParameter(format!("box length must be > 0, got {box_len}")));
        }
        if !(cutoff > 0.0) || !cutoff.is_finite() {
            return Err(Error::InvalidParameter(format!("cutoff must be > 0, got {cutoff}")));
        }
        if !(mass >= 0.0) || !mass.is_finite() {
            return Err(Error::InvalidParameter(format!("boson mass must be >= 0, got {mass}")));
        }
        let dk = 2.0 * PI / box_len;
        let jmax = (cutoff / dk + 1e-9).floor() as i64;
        let lim = cutoff * cutoff * (1.0 + 1e-12);
        let norm = dk.powi(dim as i32).sqrt() * (2.0 * PI).powf(-(dim as f64) / 2.0);

        let range = |active: bool| if active { -jmax..=jmax } else { 0..=0 };
        let mut modes = Vec::new();
        for j0 in range(true) {
            for j1 in range(dim == 3) {
                for j2 in range(dim == 3) {
                    let lattice = [j0, j1, j2];
                    let k = lattice.map(|j| j as f64 * dk);
                    let k2: f64 = k.iter().map(|x| x * x).sum();
                    if k2 > lim {
                        continue;
                    }
                    if mass == 0.0 && k2 == 0.0 {
                        continue;
                    }
                    let omega = (k2 + mass * mass).sqrt();
                    let g = norm / (2.0 * omega).sqrt();
                    modes.push(Mode {
                        lattice,
                        k,
                        omega,
                        form_factor: g,
                        theta: k.map(|x| g * x),
                    });
                }
            }
        }
        if modes.is_empty() {
            return Err(Error::EmptyModeGrid { cutoff });
        }
        let lookup: HashMap<[i64; 3], usize> =
            modes.iter().enumerate().map(|(i, m)| (m.lattice, i)).collect();
        let partner = modes
            .iter()
            .map(|m| lookup[&m.lattice.map(|j| -j)])
            .collect();
        Ok(Self {
            dim,
            box_len,
            cutoff,
            mass,
            dk,
            modes,
            partner,
            coupled: true,
        })
    }

    /// Same modes with every form factor switched off (the decoupled model).
    pub fn decoupled(mut self) -> Self {
        self.coupled = false;
        self
    }

    pub fn is_coupled(&self) -> bool {
        self.coupled
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn box_len(&self) -> f64 {
        self.box_len
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn spacing(&self) -> f64 {
        self.dk
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn mode(&self, j: usize) -> &Mode {
        &self.modes[j]
    }

    /// Index of the mode with momentum `-k_j`.
    pub fn partner(&self, j: usize) -> usize {
        self.partner[j]
    }

    pub fn omega(&self, j: usize) -> f64 {
        self.modes[j].omega
    }

    /// Effective coupling of mode `j`: the form factor, or zero when decoupled.
    pub fn g(&self, j: usize) -> f64 {
        if self.coupled {
            self.modes[j].form_factor
        } else {
            0.0
        }
    }

    /// Gradient weight `θ_j = g_j k_j` (zero when decoupled).
    pub fn theta(&self, j: usize) -> [f64; 3] {
        if self.coupled {
            self.modes[j].theta
        } else {
            [0.0; 3]
        }
    }

    /// Quadrature of the cutoff-function norms on this lattice.
    pub fn cutoff_norms(&self) -> CutoffNorms {
        let cell = self.dk.powi(self.dim as i32) * (2.0 * PI).powi(-(self.dim as i32));
        let mut norms = CutoffNorms {
            kappa_sq: 0.0,
            eta_sq: 0.0,
            theta_sq: 0.0,
        };
        for m in &self.modes {
            norms.kappa_sq += cell;
            norms.eta_sq += m.form_factor * m.form_factor;
            norms.theta_sq += m.theta.iter().map(|t| t * t).sum::<f64>();
        }
        norms
    }
}

/// Smallest `n_max` for which a coherent state of mean boson number `mean`
/// loses negligible Poisson mass above the cap:
/// `⌈mean⌉ + 6⌈√(mean + 1)⌉`.
pub fn required_n_max(mean: f64) -> usize {
    let mean = mean.max(0.0);
    mean.ceil() as usize + 6 * (mean + 1.0).sqrt().ceil() as usize
}

/// Occupation-number basis with total boson number `≤ n_max`, in graded
/// order: ascending total, then lexicographic within a sector.
#[derive(Clone, Debug)]
pub struct FockBasis {
    modes: usize,
    n_max: usize,
    occupations: Vec<u16>,
    totals: Vec<u16>,
    lower: Vec<u32>,
    raise: Vec<u32>,
    index: HashMap<Vec<u16>, usize>,
}

fn binomial(n: u128, k: u128) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

fn compositions(total: usize, parts: usize, prefix: &mut Vec<u16>, out: &mut Vec<Vec<u16>>) {
    if parts == 1 {
        prefix.push(total as u16);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in 0..=total {
        prefix.push(first as u16);
        compositions(total - first, parts - 1, prefix, out);
        prefix.pop();
    }
}

impl FockBasis {
    pub fn new(modes: usize, n_max: usize) -> Result<Self> {
        Self::with_cap(modes, n_max, DEFAULT_MAX_FOCK_DIM)
    }

    pub fn with_cap(modes: usize, n_max: usize, cap: usize) -> Result<Self> {
        if modes == 0 {
            return Err(Error::InvalidParameter("mode count must be >= 1".into()));
        }
        if n_max > u16::MAX as usize {
            return Err(Error::InvalidParameter(format!("n_max {n_max} out of range")));
        }
        let size = binomial((modes + n_max) as u128, n_max as u128).unwrap_or(u128::MAX);
        if size > cap as u128 || size >= NO_INDEX as u128 {
            return Err(Error::BasisTooLarge { dim: size, cap });
        }
        let size = size as usize;

        let mut tuples = Vec::with_capacity(size);
        for total in 0..=n_max {
            compositions(total, modes, &mut Vec::with_capacity(modes), &mut tuples);
        }
        debug_assert_eq!(tuples.len(), size);
        let index: HashMap<Vec<u16>, usize> =
            tuples.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();

        let mut lower = vec![NO_INDEX; size * modes];
        let mut raise = vec![NO_INDEX; size * modes];
        let mut work = vec![0u16; modes];
        for (b, t) in tuples.iter().enumerate() {
            let total: usize = t.iter().map(|&n| n as usize).sum();
            for j in 0..modes {
                work.copy_from_slice(t);
                if t[j] > 0 {
                    work[j] -= 1;
                    lower[b * modes + j] = index[&work] as u32;
                    work[j] += 1;
                }
                if total < n_max {
                    work[j] += 1;
                    raise[b * modes + j] = index[&work] as u32;
                }
            }
        }
        let totals = tuples.iter().map(|t| t.iter().sum()).collect();
        let occupations = tuples.concat();
        Ok(Self {
            modes,
            n_max,
            occupations,
            totals,
            lower,
            raise,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.totals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.totals.is_empty()
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn occupation(&self, b: usize) -> &[u16] {
        &self.occupations[b * self.modes..(b + 1) * self.modes]
    }

    pub fn total(&self, b: usize) -> usize {
        self.totals[b] as usize
    }

    pub fn index_of(&self, occupation: &[u16]) -> Option<usize> {
        self.index.get(occupation).copied()
    }

    /// Index of the tuple with `n_j - 1`, if `n_j ≥ 1`.
    pub fn lowered(&self, b: usize, j: usize) -> Option<usize> {
        let i = self.lower[b * self.modes + j];
        (i != NO_INDEX).then_some(i as usize)
    }

    /// Index of the tuple with `n_j + 1`, if it stays inside the truncation.
    pub fn raised(&self, b: usize, j: usize) -> Option<usize> {
        let i = self.raise[b * self.modes + j];
        (i != NO_INDEX).then_some(i as usize)
    }

    fn check_mode(&self, j: usize) -> Result<()> {
        if j >= self.modes {
            return Err(Error::InvalidModeIndex {
                index: j,
                count: self.modes,
            });
        }
        Ok(())
    }

    /// `(a_j ψ)(n) = √(n_j + 1) ψ(n + e_j)`
    pub fn apply_annihilator(&self, j: usize, psi: &[C64], out: &mut [C64]) {
        for (b, o) in out.iter_mut().enumerate() {
            *o = match self.raised(b, j) {
                Some(r) => psi[r] * (self.occupation(b)[j] as f64 + 1.0).sqrt(),
                None => C64::new(0.0, 0.0),
            };
        }
    }

    /// `(a†_j ψ)(n) = √n_j ψ(n - e_j)`; transitions out of the top sector are dropped.
    pub fn apply_creator(&self, j: usize, psi: &[C64], out: &mut [C64]) {
        for (b, o) in out.iter_mut().enumerate() {
            *o = match self.lowered(b, j) {
                Some(l) => psi[l] * (self.occupation(b)[j] as f64).sqrt(),
                None => C64::new(0.0, 0.0),
            };
        }
    }
}

/// Amplitude vector with its squared norm cached at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    amps: Vec<C64>,
    norm_sq: f64,
}

impl StateVector {
    pub fn new(amps: Vec<C64>) -> Self {
        let norm_sq = linalg::norm_sq(&amps);
        Self { amps, norm_sq }
    }

    pub fn len(&self) -> usize {
        self.amps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amps.is_empty()
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amps
    }
}

/// Square sparse operator in compressed-row form.
#[derive(Clone, Debug)]
pub struct SparseOperator {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
    hermitian: bool,
}

impl SparseOperator {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    /// With `hermitian` set, the entry set must be closed under conjugate
    /// transposition.
    pub fn from_triplets(
        dim: usize,
        mut triplets: Vec<(usize, usize, C64)>,
        hermitian: bool,
    ) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|(r, c, _)| *r >= dim || *c >= dim) {
            return Err(Error::ShapeMismatch(format!(
                "entry ({r}, {c}) outside dimension {dim}"
            )));
        }
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<C64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            cols.push(c);
            vals.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..dim {
            row_ptr[r + 1] += row_ptr[r];
        }
        let op = Self {
            dim,
            row_ptr,
            cols,
            vals,
            hermitian,
        };
        if hermitian {
            let deviation = op.hermiticity_defect();
            if deviation > 1e-13 {
                return Err(Error::NotHermitian { deviation });
            }
        }
        Ok(op)
    }

    pub fn diagonal(values: Vec<f64>) -> Self {
        let dim = values.len();
        Self {
            dim,
            row_ptr: (0..=dim).collect(),
            cols: (0..dim).collect(),
            vals: values.into_iter().map(|v| C64::new(v, 0.0)).collect(),
            hermitian: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.dim).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |p| (r, self.cols[p], self.vals[p]))
        })
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        let span = self.row_ptr[row]..self.row_ptr[row + 1];
        match self.cols[span.clone()].binary_search(&col) {
            Ok(p) => self.vals[span.start + p],
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    pub fn adjoint(&self) -> Self {
        let triplets = self.entries().map(|(r, c, v)| (c, r, v.conj())).collect();
        Self::from_triplets(self.dim, triplets, false)
            .map(|mut op| {
                op.hermitian = self.hermitian;
                op
            })
            .expect("adjoint of a valid operator")
    }

    /// `y += s · A x`
    pub fn apply_add(&self, x: &[C64], y: &mut [C64], s: C64) {
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[p] * x[self.cols[p]];
            }
            *yr += s * acc;
        }
    }

    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![C64::new(0.0, 0.0); self.dim];
        self.apply_add(x, &mut y, C64::new(1.0, 0.0));
        y
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (r, c, v) in self.entries() {
            m[(r, c)] += v;
        }
        m
    }

    fn hermiticity_defect(&self) -> f64 {
        self.entries()
            .map(|(r, c, v)| (v - self.get(c, r).conj()).norm())
            .fold(0.0, f64::max)
    }
}

pub fn annihilator(basis: &FockBasis, j: usize) -> Result<SparseOperator> {
    basis.check_mode(j)?;
    let triplets = (0..basis.len())
        .filter_map(|b| {
            basis.lowered(b, j).map(|l| {
                let n = basis.occupation(b)[j] as f64;
                (l, b, C64::new(n.sqrt(), 0.0))
            })
        })
        .collect();
    SparseOperator::from_triplets(basis.len(), triplets, false)
}

/// Adjoint of [`annihilator`] on the truncated space.
pub fn creator(basis: &FockBasis, j: usize) -> Result<SparseOperator> {
    Ok(annihilator(basis, j)?.adjoint())
}

pub fn number_operator(basis: &FockBasis) -> SparseOperator {
    SparseOperator::diagonal((0..basis.len()).map(|b| basis.total(b) as f64).collect())
}

pub fn free_field_hamiltonian(basis: &FockBasis, grid: &ModeGrid) -> Result<SparseOperator> {
    check_modes(basis, grid)?;
    Ok(SparseOperator::diagonal(field_energies(basis, grid)))
}

/// Diagonal of `H_f = Σ_j ω_j n_j`.
pub fn field_energies(basis: &FockBasis, grid: &ModeGrid) -> Vec<f64> {
    (0..basis.len())
        .map(|b| {
            basis
                .occupation(b)
                .iter()
                .enumerate()
                .map(|(j, &n)| grid.omega(j) * n as f64)
                .sum()
        })
        .collect()
}

fn check_modes(basis: &FockBasis, grid: &ModeGrid) -> Result<()> {
    if basis.modes() != grid.len() {
        return Err(Error::ModeCountMismatch {
            basis: basis.modes(),
            grid: grid.len(),
        });
    }
    Ok(())
}

fn check_position(grid: &ModeGrid, x: &[f64]) -> Result<()> {
    if x.len() != grid.dim() {
        return Err(Error::ShapeMismatch(format!(
            "position has {} components, grid dimension is {}",
            x.len(),
            grid.dim()
        )));
    }
    Ok(())
}

/// Triplets of `Σ_j c_j a_j` for per-mode coefficients `c_j`.
fn lowering_triplets(basis: &FockBasis, coeff: impl Fn(usize) -> C64) -> Vec<(usize, usize, C64)> {
    let mut t = Vec::new();
    for b in 0..basis.len() {
        for j in 0..basis.modes() {
            if let Some(l) = basis.lowered(b, j) {
                let c = coeff(j);
                if c != C64::new(0.0, 0.0) {
                    t.push((l, b, c * (basis.occupation(b)[j] as f64).sqrt()));
                }
            }
        }
    }
    t
}

fn with_adjoint(t: Vec<(usize, usize, C64)>) -> Vec<(usize, usize, C64)> {
    let adj: Vec<_> = t.iter().map(|&(r, c, v)| (c, r, v.conj())).collect();
    t.into_iter().chain(adj).collect()
}

/// `Φ̂(x) = Σ_j g_j (e^{ik_j·x} a_j + e^{-ik_j·x} a†_j)`
pub fn field_operator(grid: &ModeGrid, basis: &FockBasis, x: &[f64]) -> Result<SparseOperator> {
    check_modes(basis, grid)?;
    check_position(grid, x)?;
    let t = lowering_triplets(basis, |j| {
        C64::from_polar(grid.g(j), grid.mode(j).phase(x))
    });
    SparseOperator::from_triplets(basis.len(), with_adjoint(t), true)
}

/// `(Φ̂⁺(x), Φ̂⁻(x))` with `Φ̂⁺ = Σ g e^{ikx} a` and `Φ̂⁻ = (Φ̂⁺)†`.
pub fn field_operator_parts(
    grid: &ModeGrid,
    basis: &FockBasis,
    x: &[f64],
) -> Result<(SparseOperator, SparseOperator)> {
    check_modes(basis, grid)?;
    check_position(grid, x)?;
    let t = lowering_triplets(basis, |j| {
        C64::from_polar(grid.g(j), grid.mode(j).phase(x))
    });
    let plus = SparseOperator::from_triplets(basis.len(), t, false)?;
    let minus = plus.adjoint();
    Ok((plus, minus))
}

/// Components of `(∇Φ̂)(x) = Σ_j i θ_j (e^{ik_j·x} a_j - e^{-ik_j·x} a†_j)`.
pub fn field_gradient(grid: &ModeGrid, basis: &FockBasis, x: &[f64]) -> Result<Vec<SparseOperator>> {
    check_modes(basis, grid)?;
    check_position(grid, x)?;
    (0..grid.dim())
        .map(|axis| {
            let t = lowering_triplets(basis, |j| {
                C64::new(0.0, grid.theta(j)[axis]) * C64::from_polar(1.0, grid.mode(j).phase(x))
            });
            SparseOperator::from_triplets(basis.len(), with_adjoint(t), true)
        })
        .collect()
}

pub fn vacuum(basis: &FockBasis) -> StateVector {
    let mut amps = vec![C64::new(0.0, 0.0); basis.len()];
    amps[0] = C64::new(1.0, 0.0);
    StateVector::new(amps)
}

/// Result of a Weyl displacement with its truncation defect: the squared
/// relative norm change plus the relative weight that ends up in the top
/// sector `Σn = n_max`, where the truncated CCR fails.
#[derive(Clone, Debug)]
pub struct Displaced {
    pub state: StateVector,
    pub defect: f64,
}

/// `W(f) = exp(Σ_j f_j a†_j - f_j* a_j)` on a truncated basis, applied by a
/// scaled Taylor iteration.
#[derive(Clone, Debug)]
pub struct WeylOperator<'a> {
    basis: &'a FockBasis,
    f: Vec<C64>,
    tol: f64,
    max_terms: usize,
    substeps: usize,
}

impl<'a> WeylOperator<'a> {
    pub fn new(basis: &'a FockBasis, f: &[C64], tol: f64) -> Result<Self> {
        Self::with_budget(basis, f, tol, 64)
    }

    /// `max_terms` bounds the Taylor terms per scaled substep.
    pub fn with_budget(basis: &'a FockBasis, f: &[C64], tol: f64, max_terms: usize) -> Result<Self> {
        if f.len() != basis.modes() {
            return Err(Error::ModeCountMismatch {
                basis: basis.modes(),
                grid: f.len(),
            });
        }
        if !(tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tolerance must be > 0, got {tol}")));
        }
        let f_norm = f.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let bound = 2.0 * f_norm * (basis.n_max() as f64).sqrt();
        let substeps = ((bound / 0.5).ceil() as usize).max(1);
        Ok(Self {
            basis,
            f: f.to_vec(),
            tol,
            max_terms,
            substeps,
        })
    }

    /// `out = (Σ_j f_j a†_j - f_j* a_j) ψ`
    fn generator(&self, psi: &[C64], out: &mut [C64]) {
        let basis = self.basis;
        let f = &self.f;
        out.iter_mut().enumerate().for_each(|(b, o)| {
            let occ = basis.occupation(b);
            let mut acc = C64::new(0.0, 0.0);
            for (j, fj) in f.iter().enumerate() {
                if let Some(l) = basis.lowered(b, j) {
                    acc += fj * psi[l] * (occ[j] as f64).sqrt();
                }
                if let Some(r) = basis.raised(b, j) {
                    acc -= fj.conj() * psi[r] * (occ[j] as f64 + 1.0).sqrt();
                }
            }
            *o = acc;
        });
    }

    /// Returns `W(f) ψ` and its truncation defect.
    pub fn apply(&self, psi: &[C64]) -> Result<(Vec<C64>, f64)> {
        if psi.len() != self.basis.len() {
            return Err(Error::ShapeMismatch(format!(
                "state of length {} on a basis of size {}",
                psi.len(),
                self.basis.len()
            )));
        }
        let in_norm = linalg::norm(psi);
        let mut acc = psi.to_vec();
        if in_norm == 0.0 {
            return Ok((acc, 0.0));
        }
        let scale = 1.0 / self.substeps as f64;
        let term_tol = self.tol * in_norm * scale * 1e-2;
        let mut term = vec![C64::new(0.0, 0.0); psi.len()];
        let mut next = vec![C64::new(0.0, 0.0); psi.len()];
        for _ in 0..self.substeps {
            term.copy_from_slice(&acc);
            let mut converged = false;
            let mut residual = f64::INFINITY;
            for n in 1..=self.max_terms {
                self.generator(&term, &mut next);
                let c = scale / n as f64;
                for (t, x) in term.iter_mut().zip(&next) {
                    *t = x * c;
                }
                for (a, t) in acc.iter_mut().zip(&term) {
                    *a += t;
                }
                residual = linalg::norm(&term);
                if residual <= term_tol {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::NotConverged {
                    iterations: self.max_terms,
                    residual,
                });
            }
        }
        let out_norm_sq = linalg::norm_sq(&acc);
        let top: f64 = acc
            .iter()
            .enumerate()
            .filter(|(b, _)| self.basis.total(*b) == self.basis.n_max())
            .map(|(_, z)| z.norm_sqr())
            .sum();
        let in_sq = in_norm * in_norm;
        let defect = (1.0 - out_norm_sq / in_sq).abs() + top / in_sq;
        Ok((acc, defect))
    }
}

pub fn weyl_displace(basis: &FockBasis, f: &[C64], psi: &StateVector, tol: f64) -> Result<Displaced> {
    let (amps, defect) = WeylOperator::new(basis, f, tol)?.apply(psi.amplitudes())?;
    Ok(Displaced {
        state: StateVector::new(amps),
        defect,
    })
}

/// `W(α) Ω`
pub fn coherent_state(basis: &FockBasis, alpha: &[C64]) -> Result<Displaced> {
    weyl_displace(basis, alpha, &vacuum(basis), 1e-14)
}

/// Applies `W(f)` to every length-`basis.len()` slice of `data`.
pub fn weyl_displace_slices(basis: &FockBasis, f: &[C64], data: &[C64], tol: f64) -> Result<(Vec<C64>, f64)> {
    let w = WeylOperator::new(basis, f, tol)?;
    let parts: Vec<(Vec<C64>, f64, f64)> = data
        .par_chunks(basis.len())
        .map(|slice| {
            let weight = linalg::norm_sq(slice);
            w.apply(slice).map(|(v, d)| (v, d, weight))
        })
        .collect::<Result<_>>()?;
    let total: f64 = parts.iter().map(|p| p.2).sum();
    let mut out = Vec::with_capacity(data.len());
    let mut defect = 0.0;
    for (v, d, weight) in parts {
        out.extend(v);
        if total > 0.0 {
            defect += d * weight / total;
        }
    }
    Ok((out, defect))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn mode_grid_one_dimensional_enumeration() {
        let g = ModeGrid::new(1, 2.0 * PI, 2.5, 1.0).unwrap();
        let ks: Vec<f64> = g.modes().iter().map(|m| m.k[0]).collect();
        assert_eq!(g.len(), 5);
        for (k, want) in ks.iter().zip([-2.0, -1.0, 0.0, 1.0, 2.0]) {
            assert!((k - want).abs() < 1e-12);
        }
        let two = g.modes().iter().position(|m| (m.k[0] - 2.0).abs() < 1e-12).unwrap();
        assert!((g.omega(two) - 5f64.sqrt()).abs() < 1e-14);
        let zero = g.modes().iter().position(|m| m.k[0] == 0.0).unwrap();
        // √Δk (2π)^{-1/2} / √(2ω) with Δk = 1, ω = 1
        let want = (2.0 * PI).powf(-0.5) / 2f64.sqrt();
        assert!((g.g(zero) - want).abs() < 1e-15);
        assert!((g.g(zero) - 0.28209).abs() < 1e-5);
    }

    #[test]
    fn mode_grid_symmetry_and_massless_zero_mode() {
        let g = ModeGrid::new(3, 2.0 * PI, 1.8, 0.0).unwrap();
        assert!(g.modes().iter().all(|m| m.k_norm_sq() > 0.0));
        for j in 0..g.len() {
            let p = g.partner(j);
            for a in 0..3 {
                assert_eq!(g.mode(p).k[a], -g.mode(j).k[a]);
            }
            assert!(g.omega(j) >= g.mass());
            assert!(g.g(j) > 0.0);
        }
    }

    #[test]
    fn empty_mode_grid_is_an_error() {
        let err = ModeGrid::new(1, 2.0 * PI, 0.5, 0.0).unwrap_err();
        assert!(matches!(err, Error::EmptyModeGrid { .. }));
        assert!(err.to_string().contains("empty mode grid"));
    }

    #[test]
    fn basis_sizes() {
        let b = FockBasis::new(1, 2).unwrap();
        assert_eq!(b.len(), 3);
        for i in 0..3 {
            assert_eq!(b.occupation(i), &[i as u16]);
        }
        assert_eq!(FockBasis::new(3, 4).unwrap().len(), 35);
        assert_eq!(FockBasis::new(2, 0).unwrap().len(), 1);
    }

    #[test]
    fn basis_is_graded_and_bijective() {
        let b = FockBasis::new(3, 3).unwrap();
        for i in 0..b.len() {
            assert_eq!(b.index_of(b.occupation(i)), Some(i));
            if i > 0 {
                assert!(b.total(i) >= b.total(i - 1));
                if b.total(i) == b.total(i - 1) {
                    assert!(b.occupation(i) > b.occupation(i - 1));
                }
            }
        }
    }

    #[test]
    fn basis_too_large() {
        let err = FockBasis::with_cap(8, 8, 1000).unwrap_err();
        assert!(matches!(err, Error::BasisTooLarge { dim: 12870, .. }));
    }

    #[test]
    fn ladder_matrix_elements() {
        let b = FockBasis::new(1, 2).unwrap();
        let a = annihilator(&b, 0).unwrap();
        let ad = creator(&b, 0).unwrap();
        let ket = |n: usize| {
            let mut v = vec![c(0.0); 3];
            v[n] = c(1.0);
            v
        };
        assert_eq!(a.apply(&ket(1)), ket(0));
        assert_eq!(a.apply(&ket(0)), vec![c(0.0); 3]);
        let up = ad.apply(&ket(1));
        assert!((up[2] - c(2f64.sqrt())).norm() < 1e-15);
        assert_eq!(ad.apply(&ket(2)), vec![c(0.0); 3]);
        assert!(matches!(annihilator(&b, 1), Err(Error::InvalidModeIndex { .. })));
    }

    #[test]
    fn number_and_free_field_diagonals() {
        let grid = ModeGrid::new(1, 2.0 * PI, 2.5, 1.0).unwrap();
        let b = FockBasis::new(grid.len(), 3).unwrap();
        let n_op = number_operator(&b);
        let hf = free_field_hamiltonian(&b, &grid).unwrap();
        let t = b.index_of(&[2, 1, 0, 0, 0]).unwrap();
        assert_eq!(n_op.get(t, t), c(3.0));
        assert_eq!(hf.get(0, 0), c(0.0));
        let two = grid.modes().iter().position(|m| (m.k[0] - 2.0).abs() < 1e-12).unwrap();
        let mut occ = vec![0u16; 5];
        occ[two] = 1;
        let s = b.index_of(&occ).unwrap();
        assert!((hf.get(s, s).re - 5f64.sqrt()).abs() < 1e-14);

        let wrong = FockBasis::new(2, 3).unwrap();
        assert!(matches!(
            free_field_hamiltonian(&wrong, &grid),
            Err(Error::ModeCountMismatch { .. })
        ));
    }

    #[test]
    fn number_operator_is_sum_of_ladder_products() {
        let grid = ModeGrid::new(1, 2.0 * PI, 1.5, 1.0).unwrap();
        let b = FockBasis::new(grid.len(), 3).unwrap();
        let mut sum = DMatrix::zeros(b.len(), b.len());
        for j in 0..b.modes() {
            let a = annihilator(&b, j).unwrap().to_dense();
            sum += a.adjoint() * a;
        }
        let diff = sum - number_operator(&b).to_dense();
        assert!(diff.iter().all(|z| z.norm() < 1e-13));
    }

    #[test]
    fn field_operator_single_mode_matrix() {
        let grid = ModeGrid::new(1, 2.0 * PI, 0.5, 1.0).unwrap();
        assert_eq!(grid.len(), 1);
        let b = FockBasis::new(1, 2).unwrap();
        let phi = field_operator(&grid, &b, &[0.0]).unwrap();
        let g = grid.g(0);
        assert!((phi.get(0, 1) - c(g)).norm() < 1e-15);
        assert!((phi.get(1, 2) - c(g * 2f64.sqrt())).norm() < 1e-15);
        assert!((phi.get(1, 0) - c(g)).norm() < 1e-15);
        assert!((phi.get(2, 1) - c(g * 2f64.sqrt())).norm() < 1e-15);
        assert_eq!(phi.nnz(), 4);
    }

    #[test]
    fn field_operator_vacuum_moments() {
        let grid = ModeGrid::new(1, 2.0 * PI, 2.5, 1.0).unwrap();
        let b = FockBasis::new(grid.len(), 2).unwrap();
        let omega = vacuum(&b);
        let sum_g2: f64 = (0..grid.len()).map(|j| grid.g(j).powi(2)).sum();
        for x in [0.0, 0.7, 3.1] {
            let phi = field_operator(&grid, &b, &[x]).unwrap();
            let v = phi.apply(omega.amplitudes());
            assert!(v[0].norm() < 1e-15);
            assert!((linalg::norm_sq(&v) - sum_g2).abs() < 1e-14);
        }
    }

    #[test]
    fn field_parts_are_adjoint() {
        let grid = ModeGrid::new(1, 2.0 * PI, 2.5, 1.0).unwrap();
        let b = FockBasis::new(grid.len(), 2).unwrap();
        let x = [1.3];
        let (p, m) = field_operator_parts(&grid, &b, &x).unwrap();
        let full = field_operator(&grid, &b, &x).unwrap();
        assert!((p.to_dense().adjoint() - m.to_dense()).norm() < 1e-15);
        assert!((p.to_dense() + m.to_dense() - full.to_dense()).norm() < 1e-15);
        for grad in field_gradient(&grid, &b, &x).unwrap() {
            assert!(grad.is_hermitian());
        }
    }

    #[test]
    fn zero_displacement_is_identity() {
        let b = FockBasis::new(2, 3).unwrap();
        let psi = StateVector::new((0..b.len()).map(|i| C64::new(i as f64, 1.0)).collect());
        let out = weyl_displace(&b, &[c(0.0), c(0.0)], &psi, 1e-12).unwrap();
        assert_eq!(out.state.amplitudes(), psi.amplitudes());
    }

    #[test]
    fn coherent_mean_number() {
        let alpha = [C64::new(0.3, 0.2), C64::new(-0.1, 0.4)];
        let mean: f64 = alpha.iter().map(|a| a.norm_sqr()).sum();
        let b = FockBasis::new(2, required_n_max(mean)).unwrap();
        let coh = coherent_state(&b, &alpha).unwrap();
        let n = number_operator(&b).apply(coh.state.amplitudes());
        let got = linalg::dot(coh.state.amplitudes(), &n).re;
        assert!(coh.defect < 1e-8, "defect {}", coh.defect);
        assert!((got - mean).abs() < 1e-8);
    }

    #[test]
    fn weyl_budget_exhaustion_reports_residual() {
        let b = FockBasis::new(1, 8).unwrap();
        let err = WeylOperator::with_budget(&b, &[c(1.0)], 1e-14, 2)
            .unwrap()
            .apply(vacuum(&b).amplitudes())
            .unwrap_err();
        assert!(matches!(err, Error::NotConverged { residual, .. } if residual > 0.0));
    }

    #[test]
    fn sizing_rule() {
        assert_eq!(required_n_max(0.0), 6);
        assert_eq!(required_n_max(0.32), 13);
        assert_eq!(required_n_max(3.0), 15);
    }
}
