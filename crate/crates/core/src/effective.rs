//! Discrete Schrödinger–Klein–Gordon system, the mean-field equations of
//! the discrete Nelson Hamiltonian:
//!
//! ```text
//! i ∂_t φ   = (-Δ + Φ_cl) φ
//! i ∂_t α_j = ω_j α_j + g_j ρ̂_j,    ρ̂_j = Δx^d Σ_x e^{-i k_j·x} |φ(x)|²
//! ```

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::ModeGrid;
use crate::grid::SpatialGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveState {
    /// Grid values, `Δx^d Σ|φ|² = 1`.
    pub phi: Vec<C64>,
    pub alpha: Vec<C64>,
    pub time: f64,
}

impl EffectiveState {
    pub fn new(phi: Vec<C64>, alpha: Vec<C64>) -> Self {
        Self { phi, alpha, time: 0.0 }
    }

    /// Orthonormal-basis coefficients `φ √(Δx^d)`.
    pub fn slot_vector(&self, grid: &SpatialGrid) -> Vec<C64> {
        let s = grid.cell_volume().sqrt();
        self.phi.iter().map(|v| v * s).collect()
    }

    pub fn alpha_norm_sq(&self) -> f64 {
        self.alpha.iter().map(|a| a.norm_sqr()).sum()
    }

    fn check(&self, grid: &SpatialGrid, modes: &ModeGrid) -> Result<()> {
        if self.phi.len() != grid.nodes() {
            return Err(Error::ShapeMismatch(format!(
                "orbital has {} values on a grid of {} nodes",
                self.phi.len(),
                grid.nodes()
            )));
        }
        if self.alpha.len() != modes.len() {
            return Err(Error::ModeCountMismatch {
                basis: self.alpha.len(),
                grid: modes.len(),
            });
        }
        Ok(())
    }
}

/// `Φ_cl` with its frequency parts and gradient on every node.
#[derive(Clone, Debug)]
pub struct ClassicalField {
    pub values: Vec<f64>,
    /// `Φ⁺_cl(x) = Σ_j g_j e^{i k_j·x} α_j`
    pub plus: Vec<C64>,
    /// `Φ⁻_cl = (Φ⁺_cl)*`
    pub minus: Vec<C64>,
    /// `∂_a Φ_cl`, one grid function per axis.
    pub gradient: Vec<Vec<f64>>,
}

fn phases<'a>(grid: &SpatialGrid, modes: &'a ModeGrid, node: usize) -> impl Iterator<Item = C64> + 'a {
    let x = grid.position(node);
    modes.modes().iter().map(move |m| C64::from_polar(1.0, m.phase(&x)))
}

pub fn classical_field(alpha: &[C64], grid: &SpatialGrid, modes: &ModeGrid) -> Result<ClassicalField> {
    if alpha.len() != modes.len() {
        return Err(Error::ModeCountMismatch {
            basis: alpha.len(),
            grid: modes.len(),
        });
    }
    let d = grid.dim();
    let mut out = ClassicalField {
        values: Vec::with_capacity(grid.nodes()),
        plus: Vec::with_capacity(grid.nodes()),
        minus: Vec::with_capacity(grid.nodes()),
        gradient: vec![Vec::with_capacity(grid.nodes()); d],
    };
    for node in 0..grid.nodes() {
        let mut plus = C64::new(0.0, 0.0);
        let mut grad = [C64::new(0.0, 0.0); 3];
        for (j, e) in phases(grid, modes, node).enumerate() {
            let t = e * alpha[j];
            plus += t * modes.g(j);
            let theta = modes.theta(j);
            for a in 0..d {
                grad[a] += C64::new(0.0, theta[a]) * t;
            }
        }
        out.values.push(2.0 * plus.re);
        out.plus.push(plus);
        out.minus.push(plus.conj());
        for a in 0..d {
            out.gradient[a].push(2.0 * grad[a].re);
        }
    }
    Ok(out)
}

/// `Φ_cl` only.
pub fn classical_potential(alpha: &[C64], grid: &SpatialGrid, modes: &ModeGrid) -> Vec<f64> {
    (0..grid.nodes())
        .map(|node| {
            phases(grid, modes, node)
                .enumerate()
                .map(|(j, e)| 2.0 * modes.g(j) * (e * alpha[j]).re)
                .sum()
        })
        .collect()
}

/// `ρ̂_j = Δx^d Σ_x e^{-i k_j·x} |φ(x)|²`
pub fn density_fourier(phi: &[C64], grid: &SpatialGrid, modes: &ModeGrid) -> Vec<C64> {
    let mut rho = vec![C64::new(0.0, 0.0); modes.len()];
    for (node, v) in phi.iter().enumerate() {
        let w = v.norm_sqr();
        for (r, e) in rho.iter_mut().zip(phases(grid, modes, node)) {
            *r += e.conj() * w;
        }
    }
    let dv = grid.cell_volume();
    rho.iter_mut().for_each(|r| *r *= dv);
    rho
}

/// `(∂_t φ, ∂_t α)`
pub fn skg_rhs(state: &EffectiveState, grid: &SpatialGrid, modes: &ModeGrid) -> Result<(Vec<C64>, Vec<C64>)> {
    state.check(grid, modes)?;
    let pot = classical_potential(&state.alpha, grid, modes);
    let lap = grid.neg_laplacian(&state.phi);
    let minus_i = C64::new(0.0, -1.0);
    let dphi = lap
        .iter()
        .zip(&pot)
        .zip(&state.phi)
        .map(|((l, p), f)| minus_i * (l + f * p))
        .collect();
    let rho = density_fourier(&state.phi, grid, modes);
    let dalpha = (0..modes.len())
        .map(|j| minus_i * (state.alpha[j] * modes.omega(j) + rho[j] * modes.g(j)))
        .collect();
    Ok((dphi, dalpha))
}

/// `E = ⟨φ, -Δφ⟩ + Σ_j ω_j |α_j|² + Δx^d Σ_x Φ_cl |φ|²`
pub fn skg_energy(state: &EffectiveState, grid: &SpatialGrid, modes: &ModeGrid) -> f64 {
    let kinetic = grid.inner(&state.phi, &grid.neg_laplacian(&state.phi)).re;
    let field: f64 = (0..modes.len()).map(|j| modes.omega(j) * state.alpha[j].norm_sqr()).sum();
    let pot = classical_potential(&state.alpha, grid, modes);
    let interaction: f64 =
        pot.iter().zip(&state.phi).map(|(p, f)| p * f.norm_sqr()).sum::<f64>() * grid.cell_volume();
    kinetic + field + interaction
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Strang,
    /// Triple-jump composition of Strang steps (fourth order).
    Yoshida4,
}

/// Splitting integrator built from two exact flows: the free kinetic flow
/// and the potential/field flow, during which `|φ|²` is frozen.
#[derive(Clone, Debug)]
pub struct SkgIntegrator {
    grid: SpatialGrid,
    modes: ModeGrid,
    scheme: Scheme,
}

impl SkgIntegrator {
    pub fn new(grid: SpatialGrid, modes: ModeGrid, scheme: Scheme) -> Result<Self> {
        if grid.dim() != modes.dim() {
            return Err(Error::ShapeMismatch(format!(
                "spatial dimension {} vs mode dimension {}",
                grid.dim(),
                modes.dim()
            )));
        }
        Ok(Self { grid, modes, scheme })
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn modes(&self) -> &ModeGrid {
        &self.modes
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// `φ ← e^{iΔτ} φ`
    fn kinetic(&self, phi: &mut [C64], tau: f64) {
        let mult: Vec<C64> = self
            .grid
            .axis_momenta()
            .iter()
            .map(|k| C64::from_polar(1.0, -k * k * tau))
            .collect();
        for a in 0..self.grid.dim() {
            self.grid.apply_axis_multiplier(phi, self.grid.axis_stride(a), &mult);
        }
    }

    fn potential(&self, state: &mut EffectiveState, tau: f64) {
        let rho = density_fourier(&state.phi, &self.grid, &self.modes);
        let mut integral = vec![C64::new(0.0, 0.0); self.modes.len()];
        for j in 0..self.modes.len() {
            let w = self.modes.omega(j);
            let theta = w * tau;
            let rot = C64::from_polar(1.0, -theta);
            // (1 - e^{-iθ}) / (iω), written to avoid cancellation
            let s = (0.5 * theta).sin();
            let one_minus = C64::new(2.0 * s * s, theta.sin());
            let ramp = one_minus / C64::new(0.0, w);
            let source = rho[j] * (self.modes.g(j) / w);
            let a0 = state.alpha[j];
            integral[j] = a0 * ramp + source * (ramp - tau);
            state.alpha[j] = a0 * rot - source * one_minus;
        }
        let pot = classical_potential(&integral, &self.grid, &self.modes);
        for (f, p) in state.phi.iter_mut().zip(&pot) {
            *f *= C64::from_polar(1.0, -p);
        }
    }

    /// Potential weights of the scheme; kinetic sub-steps sit halfway
    /// between consecutive potential sub-steps.
    fn weights(&self) -> Vec<f64> {
        match self.scheme {
            Scheme::Strang => vec![1.0],
            Scheme::Yoshida4 => {
                let c = 2f64.cbrt();
                let w1 = 1.0 / (2.0 - c);
                vec![w1, -c * w1, w1]
            }
        }
    }

    /// Runs `steps` steps, fusing the closing kinetic half-step of each step
    /// with the opening one of the next.
    fn advance(&self, state: &mut EffectiveState, dt: f64, steps: usize) {
        let w = self.weights();
        let mut pending = 0.0;
        for _ in 0..steps {
            for (i, wi) in w.iter().enumerate() {
                let lead = if i == 0 { 0.5 * wi } else { 0.5 * (w[i - 1] + wi) };
                self.kinetic(&mut state.phi, (pending + lead) * dt);
                pending = 0.0;
                self.potential(state, wi * dt);
            }
            pending = 0.5 * w[w.len() - 1];
        }
        if pending != 0.0 {
            self.kinetic(&mut state.phi, pending * dt);
        }
    }

    fn check_dt(dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
        }
        Ok(())
    }

    /// One step of size `dt`.
    pub fn step(&self, state: &EffectiveState, dt: f64) -> Result<EffectiveState> {
        self.evolve(state, dt, 1)
    }

    /// `steps` steps of size `dt`; returns the final state.
    pub fn evolve(&self, state: &EffectiveState, dt: f64, steps: usize) -> Result<EffectiveState> {
        Self::check_dt(dt)?;
        state.check(&self.grid, &self.modes)?;
        let mut next = state.clone();
        self.advance(&mut next, dt, steps);
        next.time = state.time + dt * steps as f64;
        Ok(next)
    }

    /// All `steps + 1` states including the initial one.
    pub fn trajectory(&self, state: &EffectiveState, dt: f64, steps: usize) -> Result<Vec<EffectiveState>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(state.clone());
        for n in 0..steps {
            let next = self.step(&out[n], dt)?;
            out.push(next);
        }
        Ok(out)
    }
}

/// One Strang step.
pub fn skg_step(state: &EffectiveState, grid: &SpatialGrid, modes: &ModeGrid, dt: f64) -> Result<EffectiveState> {
    SkgIntegrator::new(grid.clone(), modes.clone(), Scheme::Strang)?.step(state, dt)
}

/// Maximum over interior snapshots and modes of the residual of
/// `ü_j + ω_j² u_j = -2 ω_j g_j ρ̂_j`, `u_j = α_j + α*_{-j}`, with `ü` from
/// centered differences, relative to the largest term of the equation.
pub fn second_order_residual(
    trajectory: &[EffectiveState],
    dt: f64,
    grid: &SpatialGrid,
    modes: &ModeGrid,
) -> Result<f64> {
    if trajectory.len() < 3 {
        return Err(Error::TooFewSnapshots {
            needed: 3,
            got: trajectory.len(),
        });
    }
    let u: Vec<Vec<C64>> = trajectory
        .iter()
        .map(|s| (0..modes.len()).map(|j| s.alpha[j] + s.alpha[modes.partner(j)].conj()).collect())
        .collect();
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for n in 1..trajectory.len() - 1 {
        let rho = density_fourier(&trajectory[n].phi, grid, modes);
        for j in 0..modes.len() {
            let w = modes.omega(j);
            let accel = (u[n + 1][j] - u[n][j] * 2.0 + u[n - 1][j]) / (dt * dt);
            let restoring = u[n][j] * (w * w);
            let source = rho[j] * (2.0 * w * modes.g(j));
            worst = worst.max((accel + restoring + source).norm());
            scale = scale.max(restoring.norm()).max(source.norm());
        }
    }
    Ok(if scale > 0.0 { worst / scale } else { worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn setup() -> (SpatialGrid, ModeGrid) {
        (
            SpatialGrid::new(1, 2.0 * PI, 32).unwrap(),
            ModeGrid::new(1, 2.0 * PI, 2.5, 1.0).unwrap(),
        )
    }

    #[test]
    fn zero_alpha_gives_zero_field() {
        let (grid, modes) = setup();
        let f = classical_field(&vec![C64::new(0.0, 0.0); modes.len()], &grid, &modes).unwrap();
        assert!(f.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_mode_field_is_a_cosine() {
        let (grid, modes) = setup();
        let j = modes.modes().iter().position(|m| m.lattice[0] == 2).unwrap();
        let mut alpha = vec![C64::new(0.0, 0.0); modes.len()];
        alpha[j] = C64::new(1.0, 0.0);
        let f = classical_field(&alpha, &grid, &modes).unwrap();
        for node in 0..grid.nodes() {
            let x = grid.position(node)[0];
            assert!((f.values[node] - 2.0 * modes.g(j) * (2.0 * x).cos()).abs() < 1e-14);
            assert!((f.gradient[0][node] + 4.0 * modes.g(j) * (2.0 * x).sin()).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_density_has_no_sources() {
        let grid = SpatialGrid::new(1, 2.0 * PI, 16).unwrap();
        let modes = ModeGrid::new(1, 2.0 * PI, 2.5, 0.0).unwrap();
        let phi = grid.plane_wave(&[0]);
        let rho = density_fourier(&phi, &grid, &modes);
        assert!(rho.iter().all(|r| r.norm() < 1e-15));
    }

    #[test]
    fn energy_examples() {
        let (grid, modes) = setup();
        let zero = vec![C64::new(0.0, 0.0); modes.len()];
        let s = EffectiveState::new(grid.plane_wave(&[2]), zero.clone());
        assert!((skg_energy(&s, &grid, &modes) - 4.0).abs() < 1e-12);

        let j = modes.modes().iter().position(|m| m.lattice[0] == 1).unwrap();
        let mut alpha = zero;
        alpha[j] = C64::new(0.3, -0.2);
        alpha[modes.partner(j)] = C64::new(0.1, 0.4);
        let s = EffectiveState::new(grid.plane_wave(&[0]), alpha.clone());
        let expected = modes.omega(j) * (alpha[j].norm_sqr() + alpha[modes.partner(j)].norm_sqr());
        assert!((skg_energy(&s, &grid, &modes) - expected).abs() < 1e-12);
    }

    #[test]
    fn too_few_snapshots() {
        let (grid, modes) = setup();
        let s = EffectiveState::new(grid.plane_wave(&[0]), vec![C64::new(0.0, 0.0); modes.len()]);
        assert!(matches!(
            second_order_residual(&[s.clone(), s], 0.1, &grid, &modes),
            Err(Error::TooFewSnapshots { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn rejects_nonpositive_dt() {
        let (grid, modes) = setup();
        let s = EffectiveState::new(grid.plane_wave(&[0]), vec![C64::new(0.0, 0.0); modes.len()]);
        assert!(skg_step(&s, &grid, &modes, 0.0).is_err());
    }
}
