//! Counting functionals, reduced density matrices, trace distances and the
//! exact time derivatives of the functionals.
//!
//! Slot-1 operations view the coefficient array as a `nodes × rest` matrix
//! whose row index is the position of the first particle.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;

use crate::effective::{self, EffectiveState};
use crate::error::{Error, Result};
use crate::fock::{self, CutoffNorms, FockBasis};
use crate::grid::SpatialGrid;
use crate::linalg;
use crate::manybody::{Layout, ManyBodyState, NelsonOperator};

pub use crate::linalg::trace_norm;

/// Accepted deviation of `‖Ψ‖²` and `‖φ‖²` from 1.
pub const NORM_TOL: f64 = 1e-6;
/// Largest Grönwall constant accepted as a valid envelope.
pub const C_MAX: f64 = 50.0;

const ZERO: C64 = C64::new(0.0, 0.0);

fn check_state(psi: &ManyBodyState) -> Result<()> {
    let norm_sq = psi.norm_sq();
    if (norm_sq - 1.0).abs() > NORM_TOL {
        return Err(Error::NotNormalized {
            what: "many-body state",
            norm_sq,
        });
    }
    Ok(())
}

fn slot_vector(phi: &[C64], grid: &SpatialGrid, layout: Layout) -> Result<Vec<C64>> {
    if phi.len() != layout.nodes || phi.len() != grid.nodes() {
        return Err(Error::ShapeMismatch(format!(
            "orbital has {} values, state has {} nodes per particle",
            phi.len(),
            layout.nodes
        )));
    }
    let norm_sq = grid.l2_norm_sq(phi);
    if (norm_sq - 1.0).abs() > NORM_TOL {
        return Err(Error::NotNormalized {
            what: "orbital",
            norm_sq,
        });
    }
    let s = grid.cell_volume().sqrt();
    Ok(phi.iter().map(|v| v * s).collect())
}

fn check_alpha(alpha: &[C64], basis: &FockBasis) -> Result<()> {
    if alpha.len() != basis.modes() {
        return Err(Error::ModeCountMismatch {
            basis: basis.modes(),
            grid: alpha.len(),
        });
    }
    Ok(())
}

/// `χ = ⟨v|_1 Ψ`, a vector over the remaining factors.
fn slot1_overlap(psi: &[C64], v: &[C64]) -> Vec<C64> {
    let rest = psi.len() / v.len();
    let mut chi = vec![ZERO; rest];
    for (x, row) in psi.chunks(rest).enumerate() {
        linalg::axpy(v[x].conj(), row, &mut chi);
    }
    chi
}

fn outer(v: &[C64], chi: &[C64]) -> Vec<C64> {
    let mut out = Vec::with_capacity(v.len() * chi.len());
    for vx in v {
        out.extend(chi.iter().map(|c| vx * c));
    }
    out
}

/// `p₁ Ψ`
pub fn slot1_project(psi: &[C64], v: &[C64]) -> Vec<C64> {
    outer(v, &slot1_overlap(psi, v))
}

/// `q₁ Ψ`
pub fn slot1_complement(psi: &[C64], v: &[C64]) -> Vec<C64> {
    let mut q = psi.to_vec();
    linalg::axpy(C64::new(-1.0, 0.0), &slot1_project(psi, v), &mut q);
    q
}

/// `-Δ₁ Ψ`
pub fn slot1_neg_laplacian(psi: &[C64], grid: &SpatialGrid) -> Vec<C64> {
    let rest = psi.len() / grid.nodes();
    let mult = grid.neg_second_derivative_multiplier();
    let mut out = vec![ZERO; psi.len()];
    for a in 0..grid.dim() {
        grid.add_axis_multiplier(psi, &mut out, grid.axis_stride(a) * rest, &mult, C64::new(1.0, 0.0));
    }
    out
}

/// `∂_a Ψ` on slot 1, one vector per axis.
pub fn slot1_gradient(psi: &[C64], grid: &SpatialGrid) -> Vec<Vec<C64>> {
    let rest = psi.len() / grid.nodes();
    let mult = grid.derivative_multiplier();
    (0..grid.dim())
        .map(|a| {
            let mut g = psi.to_vec();
            grid.apply_axis_multiplier(&mut g, grid.axis_stride(a) * rest, &mult);
            g
        })
        .collect()
}

/// Applies a Fock-space map chosen by the slot-1 node to every slice.
fn map_slices<F>(psi: &[C64], layout: Layout, f: F) -> Vec<C64>
where
    F: Fn(usize, &[C64], &mut [C64]) + Sync,
{
    let fd = layout.fock_dim;
    let mut out = vec![ZERO; psi.len()];
    out.par_chunks_mut(fd)
        .zip(psi.par_chunks(fd))
        .enumerate()
        .for_each(|(s, (ys, xs))| f(s, xs, ys));
    out
}

/// Sum of per-slice values, combined in slice order.
fn sum_slices<F>(psi: &[C64], layout: Layout, f: F) -> f64
where
    F: Fn(usize, &[C64]) -> f64 + Sync,
{
    let parts: Vec<f64> = psi
        .par_chunks(layout.fock_dim)
        .enumerate()
        .map(|(s, xs)| f(s, xs))
        .collect();
    parts.iter().sum()
}

/// `β^a = ⟨Ψ, q₁ Ψ⟩`
pub fn beta_a(psi: &ManyBodyState, phi: &[C64], grid: &SpatialGrid) -> Result<f64> {
    check_state(psi)?;
    let v = slot_vector(phi, grid, psi.layout())?;
    Ok(linalg::norm_sq(&slot1_complement(psi.coeffs(), &v)))
}

/// `β^b = Σ_j ‖(a_j/√N − α_j) Ψ‖²`
pub fn beta_b(psi: &ManyBodyState, alpha: &[C64], basis: &FockBasis) -> Result<f64> {
    check_state(psi)?;
    check_alpha(alpha, basis)?;
    let layout = psi.layout();
    if layout.fock_dim != basis.len() {
        return Err(Error::ShapeMismatch("state and basis differ in Fock dimension".into()));
    }
    let inv = 1.0 / (layout.particles as f64).sqrt();
    Ok(sum_slices(psi.coeffs(), layout, |_, xs| {
        let mut buf = vec![ZERO; xs.len()];
        let mut total = 0.0;
        for (j, a) in alpha.iter().enumerate() {
            basis.apply_annihilator(j, xs, &mut buf);
            total += buf.iter().zip(xs).map(|(b, x)| (b * inv - a * x).norm_sqr()).sum::<f64>();
        }
        total
    }))
}

/// `N^{-1} ⟨W(−√N α)Ψ, 𝒩 W(−√N α)Ψ⟩`, evaluated after embedding `Ψ` into a
/// basis enlarged by `pad` boson sectors so that the displacement stays
/// inside the truncation. Returns the value and the displacement defect.
pub fn beta_b_via_weyl(
    psi: &ManyBodyState,
    alpha: &[C64],
    basis: &FockBasis,
    pad: usize,
    tol: f64,
) -> Result<(f64, f64)> {
    check_state(psi)?;
    check_alpha(alpha, basis)?;
    let layout = psi.layout();
    let big = FockBasis::new(basis.modes(), basis.n_max() + pad)?;
    let embed: Vec<usize> = (0..basis.len())
        .map(|b| big.index_of(basis.occupation(b)).expect("sub-basis embeds"))
        .collect();
    let mut data = vec![ZERO; layout.spatial() * big.len()];
    for (dst, src) in data.chunks_mut(big.len()).zip(psi.coeffs().chunks(basis.len())) {
        for (b, c) in src.iter().enumerate() {
            dst[embed[b]] = *c;
        }
    }
    let n = layout.particles as f64;
    let f: Vec<C64> = alpha.iter().map(|a| -a * n.sqrt()).collect();
    let (shifted, defect) = fock::weyl_displace_slices(&big, &f, &data, tol)?;
    let big_layout = Layout {
        fock_dim: big.len(),
        ..layout
    };
    let number = sum_slices(&shifted, big_layout, |_, xs| {
        xs.iter().enumerate().map(|(b, x)| big.total(b) as f64 * x.norm_sqr()).sum()
    });
    Ok((number / n, defect))
}

/// `β^c = ‖∇₁ q₁ Ψ‖² = ⟨q₁Ψ, −Δ₁ q₁Ψ⟩`
pub fn beta_c(psi: &ManyBodyState, phi: &[C64], grid: &SpatialGrid) -> Result<f64> {
    check_state(psi)?;
    let v = slot_vector(phi, grid, psi.layout())?;
    let q = slot1_complement(psi.coeffs(), &v);
    Ok(linalg::dot(&q, &slot1_neg_laplacian(&q, grid)).re)
}

/// `β₂ = β^a + β^b + β^c`
pub fn beta2(psi: &ManyBodyState, phi: &[C64], alpha: &[C64], grid: &SpatialGrid, basis: &FockBasis) -> Result<f64> {
    Ok(beta_a(psi, phi, grid)? + beta_b(psi, alpha, basis)? + beta_c(psi, phi, grid)?)
}

/// Hermitian one-body density matrix.
#[derive(Clone, Debug)]
pub struct DensityMatrix {
    matrix: DMatrix<C64>,
}

impl DensityMatrix {
    pub fn new(matrix: DMatrix<C64>) -> Result<Self> {
        let dev = linalg::hermiticity_defect(&matrix);
        if dev > 1e-10 {
            return Err(Error::NotHermitian { deviation: dev });
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        linalg::trace(&self.matrix).re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::hermitian_eigenvalues(&self.matrix)
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// `Tr|γ − |v⟩⟨v||`
    pub fn distance_to(&self, v: &[C64]) -> Result<f64> {
        trace_norm(&(&self.matrix - projector(v)))
    }
}

/// `|v⟩⟨v|`
pub fn projector(v: &[C64]) -> DMatrix<C64> {
    DMatrix::from_fn(v.len(), v.len(), |r, c| v[r] * v[c].conj())
}

/// `γ^(1,0)` in the orthonormal lattice basis.
pub fn gamma_10(psi: &ManyBodyState) -> Result<DensityMatrix> {
    check_state(psi)?;
    let g = psi.layout().nodes;
    let rest = psi.coeffs().len() / g;
    let rows: Vec<&[C64]> = psi.coeffs().chunks(rest).collect();
    let entries: Vec<C64> = (0..g * g)
        .into_par_iter()
        .map(|i| {
            let (r, c) = (i / g, i % g);
            if c < r {
                ZERO
            } else {
                linalg::dot(rows[c], rows[r])
            }
        })
        .collect();
    let mut m = DMatrix::from_fn(g, g, |r, c| entries[r * g + c]);
    for r in 0..g {
        m[(r, r)].im = 0.0;
        for c in 0..r {
            m[(r, c)] = m[(c, r)].conj();
        }
    }
    DensityMatrix::new(m)
}

/// `Ψ ↦ (a_j Ψ)_j` for every mode.
fn lowered_all(psi: &[C64], layout: Layout, basis: &FockBasis) -> Vec<Vec<C64>> {
    (0..basis.modes())
        .map(|j| map_slices(psi, layout, |_, xs, ys| basis.apply_annihilator(j, xs, ys)))
        .collect()
}

/// `γ^(0,1)_{jl} = ⟨a_l Ψ, a_j Ψ⟩ / N`
pub fn gamma_01(psi: &ManyBodyState, basis: &FockBasis) -> Result<DensityMatrix> {
    check_state(psi)?;
    let layout = psi.layout();
    if layout.fock_dim != basis.len() {
        return Err(Error::ShapeMismatch("state and basis differ in Fock dimension".into()));
    }
    let lowered = lowered_all(psi.coeffs(), layout, basis);
    let n = layout.particles as f64;
    let m = basis.modes();
    let mut g = DMatrix::zeros(m, m);
    for j in 0..m {
        for l in j..m {
            let v = linalg::dot(&lowered[l], &lowered[j]) / n;
            g[(j, l)] = v;
            g[(l, j)] = v.conj();
        }
        g[(j, j)].im = 0.0;
    }
    DensityMatrix::new(g)
}

/// `⟨Ψ, 𝒩 Ψ⟩ / N`
pub fn mean_boson_fraction(psi: &ManyBodyState, basis: &FockBasis) -> f64 {
    let layout = psi.layout();
    sum_slices(psi.coeffs(), layout, |_, xs| {
        xs.iter().enumerate().map(|(b, x)| basis.total(b) as f64 * x.norm_sqr()).sum()
    }) / layout.particles as f64
}

/// Unitary DFT matrix of the grid (row = momentum index).
fn dft_matrix(grid: &SpatialGrid) -> DMatrix<C64> {
    let g = grid.nodes();
    let cols: Vec<Vec<C64>> = (0..g)
        .map(|x| {
            let mut e = vec![ZERO; g];
            e[x] = C64::new(1.0, 0.0);
            grid.fft_unitary(&e)
        })
        .collect();
    DMatrix::from_fn(g, g, |r, c| cols[c][r])
}

/// `Tr|√(1−Δ) (γ − |φ⟩⟨φ|) √(1−Δ)|`
pub fn sobolev_trace_distance(gamma: &DensityMatrix, phi: &[C64], grid: &SpatialGrid) -> Result<f64> {
    if gamma.dim() != grid.nodes() || phi.len() != grid.nodes() {
        return Err(Error::ShapeMismatch("density matrix, orbital and grid disagree".into()));
    }
    let s = grid.cell_volume().sqrt();
    let v: Vec<C64> = phi.iter().map(|z| z * s).collect();
    let u = dft_matrix(grid);
    let a = &u * (gamma.matrix() - projector(&v)) * u.adjoint();
    let w: Vec<f64> = (0..grid.nodes())
        .map(|m| (1.0 - grid.laplacian_multiplier(m)).sqrt())
        .collect();
    let weighted = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[(r, c)] * (w[r] * w[c]));
    trace_norm(&weighted)
}

/// Both sides of the density-matrix inequalities.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DensityBounds {
    pub beta_a: f64,
    pub beta_b: f64,
    pub beta_c: f64,
    pub trace_distance: f64,
    pub trace_upper: f64,
    pub field_distance: f64,
    pub field_upper: f64,
    pub sobolev_distance: f64,
    pub sobolev_upper: f64,
    /// `2‖γ − p‖_HS + Tr(γ − p)`
    pub projector_upper: f64,
}

impl DensityBounds {
    /// Largest amount by which any inequality is violated (≤ 0 when all hold).
    pub fn worst_violation(&self) -> f64 {
        [
            self.beta_a - self.trace_distance,
            self.trace_distance - self.trace_upper,
            self.field_distance - self.field_upper,
            self.sobolev_distance - self.sobolev_upper,
            self.trace_distance - self.projector_upper,
        ]
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn holds(&self, slack: f64) -> bool {
        self.worst_violation() <= slack
    }
}

pub fn density_matrix_bounds(
    psi: &ManyBodyState,
    phi: &[C64],
    alpha: &[C64],
    grid: &SpatialGrid,
    basis: &FockBasis,
) -> Result<DensityBounds> {
    let v = slot_vector(phi, grid, psi.layout())?;
    let ba = beta_a(psi, phi, grid)?;
    let bb = beta_b(psi, alpha, basis)?;
    let bc = beta_c(psi, phi, grid)?;
    let g10 = gamma_10(psi)?;
    let g01 = gamma_01(psi, basis)?;
    let diff = g10.matrix() - projector(&v);
    let alpha_norm = alpha.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    let h1 = grid.h1_norm_sq(phi);
    let ac = (ba + bc).max(0.0);
    Ok(DensityBounds {
        beta_a: ba,
        beta_b: bb,
        beta_c: bc,
        trace_distance: trace_norm(&diff)?,
        trace_upper: (8.0 * ba.max(0.0)).sqrt(),
        field_distance: g01.distance_to(alpha)?,
        field_upper: 3.0 * bb + 6.0 * alpha_norm * bb.max(0.0).sqrt(),
        sobolev_distance: sobolev_trace_distance(&g10, phi, grid)?,
        sobolev_upper: (1.0 + h1) * ac + 2.0 * h1.sqrt() * ac.sqrt(),
        projector_upper: 2.0 * linalg::hs_norm(&diff) + linalg::trace(&diff).re,
    })
}

/// Where the field is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    /// `x₁`, the position operator of the first particle.
    FirstParticle,
    /// A fixed grid node.
    Node(usize),
}

/// Field-difference norms with their bounds in terms of `β^b`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FieldDifferenceReport {
    pub norms: CutoffNorms,
    pub beta_b: f64,
    /// `‖(Φ̂/√N − Φ_cl) Ψ‖²`
    pub full: f64,
    /// `‖(Φ̂⁺/√N − Φ⁺_cl) Ψ‖²`
    pub plus: f64,
    /// `‖(Φ̂⁻/√N − Φ⁻_cl) Ψ‖²`
    pub minus: f64,
    /// `‖(Φ̂/√N − Φ_cl) p₁ Ψ‖²`
    pub projected: f64,
    /// `Σ_a ‖(∂_aΦ̂/√N − ∂_aΦ_cl) Ψ‖²`
    pub gradient: f64,
    /// `Σ_a ‖(Φ̂/√N − Φ_cl) ∂_{1,a} p₁ Ψ‖²`
    pub projected_gradient: f64,
    pub bound_full: f64,
    pub bound_plus: f64,
    pub bound_minus: f64,
    pub bound_projected: f64,
    pub bound_gradient: f64,
    pub bound_projected_gradient: f64,
}

impl FieldDifferenceReport {
    pub fn worst_violation(&self) -> f64 {
        [
            self.full - self.bound_full,
            self.plus - self.bound_plus,
            self.minus - self.bound_minus,
            self.projected - self.bound_projected,
            self.gradient - self.bound_gradient,
            self.projected_gradient - self.bound_projected_gradient,
        ]
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn holds(&self, slack: f64) -> bool {
        self.worst_violation() <= slack
    }
}

/// Per-node quantum and classical field data used by the slot maps.
struct NodeFields {
    plus: Vec<fock::SparseOperator>,
    minus: Vec<fock::SparseOperator>,
    grad: Vec<Vec<fock::SparseOperator>>,
    cl: effective::ClassicalField,
}

pub fn field_difference_norms(
    psi: &ManyBodyState,
    phi: &[C64],
    alpha: &[C64],
    position: Position,
    op: &NelsonOperator,
) -> Result<FieldDifferenceReport> {
    check_state(psi)?;
    let (grid, modes, basis) = (op.grid(), op.modes(), op.basis());
    check_alpha(alpha, basis)?;
    let layout = psi.layout();
    if layout != op.layout() {
        return Err(Error::ShapeMismatch("state and operator layouts differ".into()));
    }
    let v = slot_vector(phi, grid, layout)?;
    if let Position::Node(n) = position {
        if n >= grid.nodes() {
            return Err(Error::InvalidParameter(format!("node {n} outside the grid")));
        }
    }
    let mut fields = NodeFields {
        plus: Vec::new(),
        minus: Vec::new(),
        grad: Vec::new(),
        cl: effective::classical_field(alpha, grid, modes)?,
    };
    for node in 0..grid.nodes() {
        let x = grid.position_slice(node);
        let (p, m) = fock::field_operator_parts(modes, basis, &x)?;
        fields.plus.push(p);
        fields.minus.push(m);
        fields.grad.push(fock::field_gradient(modes, basis, &x)?);
    }
    let inv = C64::new(1.0 / (layout.particles as f64).sqrt(), 0.0);
    let node_of = |s: usize| match position {
        Position::FirstParticle => layout.node_of(s, 0),
        Position::Node(n) => n,
    };
    let apply = |y: &[C64], which: u8| -> Vec<C64> {
        map_slices(y, layout, |s, xs, ys| {
            let x = node_of(s);
            let c = match which {
                0 => {
                    fields.plus[x].apply_add(xs, ys, inv);
                    fields.minus[x].apply_add(xs, ys, inv);
                    C64::new(fields.cl.values[x], 0.0)
                }
                1 => {
                    fields.plus[x].apply_add(xs, ys, inv);
                    fields.cl.plus[x]
                }
                2 => {
                    fields.minus[x].apply_add(xs, ys, inv);
                    fields.cl.minus[x]
                }
                a => {
                    let a = (a - 3) as usize;
                    fields.grad[x][a].apply_add(xs, ys, inv);
                    C64::new(fields.cl.gradient[a][x], 0.0)
                }
            };
            linalg::axpy(-c, xs, ys);
        })
    };
    let coeffs = psi.coeffs();
    let projected_state = slot1_project(coeffs, &v);
    let full = linalg::norm_sq(&apply(coeffs, 0));
    let plus = linalg::norm_sq(&apply(coeffs, 1));
    let minus = linalg::norm_sq(&apply(coeffs, 2));
    let projected = linalg::norm_sq(&apply(&projected_state, 0));
    let mut gradient = 0.0;
    let mut projected_gradient = 0.0;
    for (a, dp) in slot1_gradient(&projected_state, grid).iter().enumerate() {
        gradient += linalg::norm_sq(&apply(coeffs, 3 + a as u8));
        projected_gradient += linalg::norm_sq(&apply(dp, 0));
    }
    let bb = beta_b(psi, alpha, basis)?;
    let norms = modes.cutoff_norms();
    let (eta, theta) = if modes.is_coupled() {
        (norms.eta_sq, norms.theta_sq)
    } else {
        (0.0, 0.0)
    };
    let n = layout.particles as f64;
    let grad_phi: f64 = grid.gradient(phi).iter().map(|g| grid.l2_norm_sq(g)).sum();
    let chain = 4.0 * bb + 2.0 / n;
    Ok(FieldDifferenceReport {
        norms,
        beta_b: bb,
        full,
        plus,
        minus,
        projected,
        gradient,
        projected_gradient,
        bound_full: eta * chain,
        bound_plus: eta * bb,
        bound_minus: eta * (bb + 1.0 / n),
        bound_projected: eta * chain,
        bound_gradient: theta * chain,
        bound_projected_gradient: eta * grad_phi * chain,
    })
}

/// Deliberate faults for checking that the identity suites can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Flips the sign of the `ρ̂` source term in `d_tβ^b`.
    FlipBetaBSource,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct BetaDerivatives {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl BetaDerivatives {
    pub fn beta(&self) -> f64 {
        self.a + self.b
    }

    pub fn beta2(&self) -> f64 {
        self.a + self.b + self.c
    }
}

pub fn dbeta_dt_analytic(psi: &ManyBodyState, eff: &EffectiveState, op: &NelsonOperator) -> Result<BetaDerivatives> {
    dbeta_dt_analytic_with(psi, eff, op, Fault::None)
}

/// Exact time derivatives of `β^a`, `β^b`, `β^c` along the coupled flows:
///
/// ```text
/// d_tβ^a = −2 Im⟨Ψ, D q₁Ψ⟩,                 D = Φ̂(x₁)/√N − Φ_cl(x₁)
/// d_tβ^b =  2 Im⟨Ψ, Σ_j g_j ρ̂_j* B_j Ψ⟩ − 2 Im⟨Ψ, N⁻¹ Σ_l Σ_j g_j e^{ik_j·x_l} B_j Ψ⟩
/// d_tβ^c =  2 Im⟨p₁DΨ, −Δ₁q₁Ψ⟩ − 2 Im⟨D p₁Ψ, −Δ₁q₁Ψ⟩ − 2 Im⟨N^{-1/2}Φ̂(x₁) q₁Ψ, −Δ₁q₁Ψ⟩
/// ```
///
/// with `B_j = a_j/√N − α_j`.
pub fn dbeta_dt_analytic_with(
    psi: &ManyBodyState,
    eff: &EffectiveState,
    op: &NelsonOperator,
    fault: Fault,
) -> Result<BetaDerivatives> {
    check_state(psi)?;
    let (grid, modes, basis) = (op.grid(), op.modes(), op.basis());
    let layout = psi.layout();
    if layout != op.layout() {
        return Err(Error::ShapeMismatch("state and operator layouts differ".into()));
    }
    check_alpha(&eff.alpha, basis)?;
    let v = slot_vector(&eff.phi, grid, layout)?;
    let n = layout.particles as f64;
    let inv = C64::new(1.0 / n.sqrt(), 0.0);
    let coupled = op.is_coupled();
    let cl = effective::classical_potential(&eff.alpha, grid, modes);
    let apply_d = |y: &[C64], with_classical: bool| -> Vec<C64> {
        map_slices(y, layout, |s, xs, ys| {
            let x = layout.node_of(s, 0);
            if coupled {
                op.field_block(x).apply_add(xs, ys, inv);
            }
            if with_classical {
                linalg::axpy(C64::new(-cl[x], 0.0), xs, ys);
            }
        })
    };
    let coeffs = psi.coeffs();
    let q = slot1_complement(coeffs, &v);
    let p = slot1_project(coeffs, &v);

    let da = -2.0 * linalg::dot(coeffs, &apply_d(&q, true)).im;

    let rho = effective::density_fourier(&eff.phi, grid, modes);
    let source_sign = match fault {
        Fault::None => 1.0,
        Fault::FlipBetaBSource => -1.0,
    };
    // per-node e^{ik_j·x}
    let waves: Vec<Vec<C64>> = (0..grid.nodes())
        .map(|node| {
            let x = grid.position(node);
            modes.modes().iter().map(|m| C64::from_polar(1.0, m.phase(&x))).collect()
        })
        .collect();
    let parts: Vec<C64> = coeffs
        .par_chunks(layout.fock_dim)
        .enumerate()
        .map(|(s, xs)| {
            let mut buf = vec![ZERO; xs.len()];
            let mut acc = ZERO;
            for (j, a) in eff.alpha.iter().enumerate() {
                let g = modes.g(j);
                if g == 0.0 {
                    continue;
                }
                basis.apply_annihilator(j, xs, &mut buf);
                for (b, x) in buf.iter_mut().zip(xs) {
                    *b = *b * inv - a * x;
                }
                let mut avg = ZERO;
                for l in 0..layout.particles {
                    avg += waves[layout.node_of(s, l)][j];
                }
                let weight = rho[j].conj() * source_sign - avg / n;
                acc += linalg::dot(xs, &buf) * weight * g;
            }
            acc
        })
        .collect();
    let db = 2.0 * parts.iter().sum::<C64>().im;

    let lap_q = slot1_neg_laplacian(&q, grid);
    let d_psi = apply_d(coeffs, true);
    let t1 = linalg::dot(&slot1_project(&d_psi, &v), &lap_q).im;
    let t2 = linalg::dot(&apply_d(&p, true), &lap_q).im;
    let t3 = linalg::dot(&apply_d(&q, false), &lap_q).im;
    let dc = 2.0 * t1 - 2.0 * t2 - 2.0 * t3;

    Ok(BetaDerivatives { a: da, b: db, c: dc })
}

/// All indicators for one snapshot.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct IndicatorReport {
    pub time: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    pub beta_c: f64,
    pub beta: f64,
    pub beta2: f64,
    pub tr_dist_10: f64,
    pub tr_dist_01: f64,
    pub sobolev_dist: f64,
    pub mean_boson: f64,
    pub dbeta_a_dt: f64,
    pub dbeta_b_dt: f64,
    pub dbeta_c_dt: f64,
}

pub fn indicator_report(psi: &ManyBodyState, eff: &EffectiveState, op: &NelsonOperator) -> Result<IndicatorReport> {
    indicator_report_with(psi, eff, op, Fault::None)
}

pub fn indicator_report_with(
    psi: &ManyBodyState,
    eff: &EffectiveState,
    op: &NelsonOperator,
    fault: Fault,
) -> Result<IndicatorReport> {
    let (grid, basis) = (op.grid(), op.basis());
    let v = slot_vector(&eff.phi, grid, psi.layout())?;
    let ba = beta_a(psi, &eff.phi, grid)?;
    let bb = beta_b(psi, &eff.alpha, basis)?;
    let bc = beta_c(psi, &eff.phi, grid)?;
    let g10 = gamma_10(psi)?;
    let g01 = gamma_01(psi, basis)?;
    let d = dbeta_dt_analytic_with(psi, eff, op, fault)?;
    Ok(IndicatorReport {
        time: psi.time(),
        beta_a: ba,
        beta_b: bb,
        beta_c: bc,
        beta: ba + bb,
        beta2: ba + bb + bc,
        tr_dist_10: g10.distance_to(&v)?,
        tr_dist_01: g01.distance_to(&eff.alpha)?,
        sobolev_dist: sobolev_trace_distance(&g10, &eff.phi, grid)?,
        mean_boson: mean_boson_fraction(psi, basis),
        dbeta_a_dt: d.a,
        dbeta_b_dt: d.b,
        dbeta_c_dt: d.c,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GronwallFit {
    /// Smallest `C` with `β(t) ≤ e^{CΛ²t}(β(0) + 1/N)` at every sample.
    pub c: f64,
    pub valid: bool,
    /// Same for `β₂` with `Λ⁴`.
    pub c2: f64,
    pub valid2: bool,
}

/// Envelope inversion `C = max_t log(v(t)/(v(0) + 1/N)) / (Λ^p t)`, clamped at 0.
pub fn envelope_constant(times: &[f64], values: &[f64], particles: usize, cutoff: f64, power: i32) -> Result<f64> {
    if times.is_empty() {
        return Err(Error::EmptySeries);
    }
    if times.len() < 3 {
        return Err(Error::TooFewSnapshots {
            needed: 3,
            got: times.len(),
        });
    }
    if times.len() != values.len() {
        return Err(Error::ShapeMismatch("times and values differ in length".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("time series must be strictly increasing".into()));
    }
    let base = values[0] + 1.0 / particles as f64;
    let rate = cutoff.powi(power);
    let mut c = 0.0f64;
    for (&t, &v) in times.iter().zip(values).skip(1) {
        if t <= times[0] || v <= 0.0 {
            continue;
        }
        c = c.max((v / base).ln() / (rate * (t - times[0])));
    }
    Ok(c)
}

pub fn gronwall_fit(series: &[IndicatorReport], particles: usize, cutoff: f64) -> Result<GronwallFit> {
    let times: Vec<f64> = series.iter().map(|r| r.time).collect();
    let beta: Vec<f64> = series.iter().map(|r| r.beta).collect();
    let beta2: Vec<f64> = series.iter().map(|r| r.beta2).collect();
    let c = envelope_constant(&times, &beta, particles, cutoff, 2)?;
    let c2 = envelope_constant(&times, &beta2, particles, cutoff, 4)?;
    Ok(GronwallFit {
        c,
        valid: c.is_finite() && c <= C_MAX,
        c2,
        valid2: c2.is_finite() && c2 <= C_MAX,
    })
}
