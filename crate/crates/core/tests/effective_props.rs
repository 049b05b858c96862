use std::f64::consts::PI;

use nelson_core::effective::{
    classical_field, density_fourier, second_order_residual, skg_energy, skg_rhs, EffectiveState, Scheme,
    SkgIntegrator,
};
use nelson_core::fock::ModeGrid;
use nelson_core::grid::SpatialGrid;
use nelson_core::{linalg, Error, C64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const I: C64 = C64 { re: 0.0, im: 1.0 };

fn setup(n_x: usize, cutoff: f64) -> (SpatialGrid, ModeGrid) {
    (
        SpatialGrid::new(1, 2.0 * PI, n_x).unwrap(),
        ModeGrid::new(1, 2.0 * PI, cutoff, 1.0).unwrap(),
    )
}

fn start(grid: &SpatialGrid, modes: &ModeGrid) -> EffectiveState {
    let phi = grid.gaussian(&[PI], 0.7, &[1.0]);
    let mut alpha = vec![ZERO; modes.len()];
    alpha[1] = C64::new(0.5, 0.2);
    alpha[3] = C64::new(-0.1, 0.3);
    EffectiveState::new(phi, alpha)
}

fn wavenumber(m: usize, n: usize) -> f64 {
    if m <= n / 2 {
        m as f64
    } else {
        m as f64 - n as f64
    }
}

/// `e^{iΔh}` by a direct Fourier sum.
fn free_flow(phi: &[C64], grid: &SpatialGrid, h: f64) -> Vec<C64> {
    let n = phi.len();
    let xs: Vec<f64> = (0..n).map(|i| grid.position(i)[0]).collect();
    let coeffs: Vec<C64> = (0..n)
        .map(|m| {
            let k = wavenumber(m, n);
            xs.iter().zip(phi).map(|(x, f)| f * C64::from_polar(1.0, -k * x)).sum::<C64>() / n as f64
        })
        .collect();
    xs.iter()
        .map(|x| {
            (0..n)
                .map(|m| {
                    let k = wavenumber(m, n);
                    coeffs[m] * C64::from_polar(1.0, k * x - k * k * h)
                })
                .sum()
        })
        .collect()
}

fn linear_flow(s: &(Vec<C64>, Vec<C64>), grid: &SpatialGrid, modes: &ModeGrid, h: f64) -> (Vec<C64>, Vec<C64>) {
    let alpha = s.1.iter().enumerate().map(|(j, a)| a * C64::from_polar(1.0, -modes.omega(j) * h)).collect();
    (free_flow(&s.0, grid, h), alpha)
}

fn nonlinear(s: &(Vec<C64>, Vec<C64>), grid: &SpatialGrid, modes: &ModeGrid) -> (Vec<C64>, Vec<C64>) {
    let state = EffectiveState::new(s.0.clone(), s.1.clone());
    let (dphi, dalpha) = skg_rhs(&state, grid, modes).unwrap();
    let lap = grid.neg_laplacian(&s.0);
    let dphi = dphi.iter().zip(&lap).map(|(d, l)| d + I * l).collect();
    let dalpha = dalpha.iter().enumerate().map(|(j, d)| d + I * modes.omega(j) * s.1[j]).collect();
    (dphi, dalpha)
}

fn axpy(a: &(Vec<C64>, Vec<C64>), c: f64, b: &(Vec<C64>, Vec<C64>)) -> (Vec<C64>, Vec<C64>) {
    (
        a.0.iter().zip(&b.0).map(|(x, y)| x + y * c).collect(),
        a.1.iter().zip(&b.1).map(|(x, y)| x + y * c).collect(),
    )
}

/// Integrating-factor RK4 with the linear part solved exactly.
fn lawson_rk4(s0: &EffectiveState, grid: &SpatialGrid, modes: &ModeGrid, h: f64, steps: usize) -> EffectiveState {
    let mut u = (s0.phi.clone(), s0.alpha.clone());
    for _ in 0..steps {
        let e = |v: &(Vec<C64>, Vec<C64>), t: f64| linear_flow(v, grid, modes, t);
        let k1 = nonlinear(&u, grid, modes);
        let k2 = nonlinear(&e(&axpy(&u, h / 2.0, &k1), h / 2.0), grid, modes);
        let k3 = nonlinear(&axpy(&e(&u, h / 2.0), h / 2.0, &k2), grid, modes);
        let k4 = nonlinear(&axpy(&e(&u, h), h, &e(&k3, h / 2.0)), grid, modes);
        let mid = e(&axpy(&k2, 1.0, &k3), h / 2.0);
        let mut next = e(&u, h);
        next = axpy(&next, h / 6.0, &e(&k1, h));
        next = axpy(&next, h / 3.0, &mid);
        next = axpy(&next, h / 6.0, &k4);
        u = next;
    }
    EffectiveState::new(u.0, u.1)
}

fn max_diff(a: &EffectiveState, b: &EffectiveState) -> f64 {
    a.phi
        .iter()
        .zip(&b.phi)
        .chain(a.alpha.iter().zip(&b.alpha))
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

#[test]
fn source_matches_direct_quadrature() {
    let (grid, modes) = setup(64, 2.5);
    let phi = grid.gaussian(&[2.0], 0.6, &[0.5]);
    let rho = density_fourier(&phi, &grid, &modes);
    let dx = grid.spacing();
    for (j, m) in modes.modes().iter().enumerate() {
        let direct: C64 = (0..64)
            .map(|i| {
                let x = i as f64 * dx;
                C64::from_polar(phi[i].norm_sqr() * dx, -m.k[0] * x)
            })
            .sum();
        assert!((rho[j] - direct).norm() < 1e-12);
    }
}

#[test]
fn rhs_matches_the_field_equations() {
    let (grid, modes) = setup(32, 2.5);
    let s = start(&grid, &modes);
    let (dphi, dalpha) = skg_rhs(&s, &grid, &modes).unwrap();
    let dx = grid.spacing();
    let n = s.phi.len();
    for i in 0..n {
        let x = i as f64 * dx;
        let pot: f64 = (0..modes.len())
            .map(|j| 2.0 * modes.g(j) * (s.alpha[j] * C64::from_polar(1.0, modes.mode(j).k[0] * x)).re)
            .sum();
        let kinetic: C64 = (0..n)
            .map(|m| {
                let k = wavenumber(m, n);
                let c: C64 = (0..n).map(|y| s.phi[y] * C64::from_polar(1.0, k * (x - y as f64 * dx))).sum();
                c * k * k / n as f64
            })
            .sum();
        assert!((dphi[i] + I * (kinetic + s.phi[i] * pot)).norm() < 1e-10);
    }
    for j in 0..modes.len() {
        let rho: C64 = (0..n)
            .map(|i| C64::from_polar(s.phi[i].norm_sqr() * dx, -modes.mode(j).k[0] * i as f64 * dx))
            .sum();
        let expected = -I * (s.alpha[j] * modes.omega(j) + rho * modes.g(j));
        assert!((dalpha[j] - expected).norm() < 1e-12);
    }
}

#[test]
fn flat_density_has_no_finite_momentum_source() {
    let (grid, modes) = setup(16, 2.5);
    let phi = vec![C64::new(1.0 / (2.0 * PI).sqrt(), 0.0); 16];
    let rho = density_fourier(&phi, &grid, &modes);
    for (j, m) in modes.modes().iter().enumerate() {
        let expected = if m.lattice[0] == 0 { 1.0 } else { 0.0 };
        assert!((rho[j] - C64::new(expected, 0.0)).norm() < 1e-14);
    }
}

#[test]
fn decoupled_flow_is_exact() {
    let (grid, modes) = setup(32, 2.5);
    let modes = modes.decoupled();
    let s = start(&grid, &modes);
    let (dphi, _) = skg_rhs(&s, &grid, &modes).unwrap();
    let lap = grid.neg_laplacian(&s.phi);
    assert!(dphi.iter().zip(&lap).all(|(d, l)| (d + I * l).norm() < 1e-13));
    for scheme in [Scheme::Strang, Scheme::Yoshida4] {
        let integ = SkgIntegrator::new(grid.clone(), modes.clone(), scheme).unwrap();
        let out = integ.evolve(&s, 0.1, 10).unwrap();
        let phi = free_flow(&s.phi, &grid, 1.0);
        assert!(linalg::distance(&out.phi, &phi) < 1e-11);
        for j in 0..modes.len() {
            assert!((out.alpha[j] - s.alpha[j] * C64::from_polar(1.0, -modes.omega(j))).norm() < 1e-13);
        }
        assert!((out.time - 1.0).abs() < 1e-14);
    }
}

#[test]
fn coupled_flow_matches_integrating_factor_rk4() {
    let (grid, modes) = setup(32, 2.5);
    let s = start(&grid, &modes);
    let reference = lawson_rk4(&s, &grid, &modes, 1e-3, 1000);
    let coarse = lawson_rk4(&s, &grid, &modes, 2e-3, 500);
    assert!(max_diff(&reference, &coarse) < 1e-9);
    let y4 = SkgIntegrator::new(grid.clone(), modes.clone(), Scheme::Yoshida4).unwrap();
    assert!(max_diff(&y4.evolve(&s, 1e-3, 1000).unwrap(), &reference) < 1e-8);
    let strang = SkgIntegrator::new(grid.clone(), modes.clone(), Scheme::Strang).unwrap();
    let full = strang.evolve(&s, 2e-3, 500).unwrap();
    let half = strang.evolve(&s, 1e-3, 1000).unwrap();
    let richardson = EffectiveState::new(
        half.phi.iter().zip(&full.phi).map(|(h, f)| (h * 4.0 - f) / 3.0).collect(),
        half.alpha.iter().zip(&full.alpha).map(|(h, f)| (h * 4.0 - f) / 3.0).collect(),
    );
    assert!(max_diff(&richardson, &reference) < 1e-8);
    assert!(max_diff(&half, &reference) > 1e-9);
}

#[test]
fn norm_is_kept_over_long_runs() {
    let (grid, modes) = setup(64, 2.5);
    let integ = SkgIntegrator::new(grid.clone(), modes.clone(), Scheme::Strang).unwrap();
    let out = integ.evolve(&start(&grid, &modes), 1e-3, 10_000).unwrap();
    assert!((grid.l2_norm_sq(&out.phi).sqrt() - 1.0).abs() < 1e-12);
}

#[test]
fn energy_examples() {
    let (grid, modes) = setup(16, 2.5);
    let wave = grid.plane_wave(&[2]);
    let vac = EffectiveState::new(wave.clone(), vec![ZERO; modes.len()]);
    assert!((skg_energy(&vac, &grid, &modes) - 4.0).abs() < 1e-12);
    let j = modes.modes().iter().position(|m| m.lattice[0] == 1).unwrap();
    let p = modes.partner(j);
    let mut alpha = vec![ZERO; modes.len()];
    alpha[j] = C64::new(0.3, 0.1);
    alpha[p] = C64::new(0.3, 0.1);
    let pair = EffectiveState::new(wave, alpha);
    let expected = 4.0 + 2.0 * modes.omega(j) * 0.1;
    assert!((skg_energy(&pair, &grid, &modes) - expected).abs() < 1e-12);
}

#[test]
fn energy_is_conserved_by_the_splitting() {
    let (grid, modes) = setup(64, 2.5);
    let s = start(&grid, &modes);
    let e0 = skg_energy(&s, &grid, &modes);
    let integ = SkgIntegrator::new(grid.clone(), modes.clone(), Scheme::Strang).unwrap();
    let traj = integ.trajectory(&s, 1e-3, 1000).unwrap();
    let worst = traj.iter().map(|t| (skg_energy(t, &grid, &modes) - e0).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-5 * e0.abs(), "{worst}");
}

#[test]
fn residual_converges_at_second_order() {
    let (grid, modes) = setup(32, 2.5);
    let s = start(&grid, &modes);
    for m in [modes.clone(), modes.clone().decoupled()] {
        let integ = SkgIntegrator::new(grid.clone(), m.clone(), Scheme::Strang).unwrap();
        let r1 = second_order_residual(&integ.trajectory(&s, 4e-3, 250).unwrap(), 4e-3, &grid, &m).unwrap();
        let r2 = second_order_residual(&integ.trajectory(&s, 2e-3, 500).unwrap(), 2e-3, &grid, &m).unwrap();
        assert!((3.6..=4.4).contains(&(r1 / r2)), "{}", r1 / r2);
    }
}

#[test]
fn stationary_point_has_no_residual() {
    let (grid, modes) = setup(16, 2.5);
    let phi = vec![C64::new(1.0 / (2.0 * PI).sqrt(), 0.0); 16];
    let rho = density_fourier(&phi, &grid, &modes);
    let alpha: Vec<C64> = (0..modes.len()).map(|j| -rho[j] * modes.g(j) / modes.omega(j)).collect();
    let s = EffectiveState::new(phi, alpha);
    let integ = SkgIntegrator::new(grid.clone(), modes.clone(), Scheme::Strang).unwrap();
    let traj = integ.trajectory(&s, 1e-2, 50).unwrap();
    let last = traj.last().unwrap();
    for (a, b) in last.alpha.iter().zip(&s.alpha) {
        assert!((a - b).norm() < 1e-12);
    }
    assert!(second_order_residual(&traj, 1e-2, &grid, &modes).unwrap() < 1e-8);
}

#[test]
fn bad_inputs_are_rejected() {
    let (grid, modes) = setup(16, 2.5);
    let s = start(&grid, &modes);
    let integ = SkgIntegrator::new(grid.clone(), modes.clone(), Scheme::Strang).unwrap();
    assert!(integ.step(&s, 0.0).is_err());
    assert!(integ.step(&s, -1e-3).is_err());
    let short = integ.trajectory(&s, 1e-3, 1).unwrap();
    assert!(matches!(
        second_order_residual(&short, 1e-3, &grid, &modes),
        Err(Error::TooFewSnapshots { needed: 3, got: 2 })
    ));
    let wrong = EffectiveState::new(s.phi.clone(), vec![ZERO; 2]);
    assert!(skg_rhs(&wrong, &grid, &modes).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn field_gradient_is_bounded(seed in 0u64..10_000) {
        let (grid, modes) = setup(32, 2.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha: Vec<C64> = (0..modes.len())
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let field = classical_field(&alpha, &grid, &modes).unwrap();
        let bound: f64 = (0..modes.len()).map(|j| 2.0 * modes.theta(j)[0].abs() * alpha[j].norm()).sum();
        let value_bound: f64 = (0..modes.len()).map(|j| 2.0 * modes.g(j) * alpha[j].norm()).sum();
        prop_assert!(field.gradient[0].iter().all(|g| g.abs() <= bound + 1e-14));
        prop_assert!(field.values.iter().all(|v| v.abs() <= value_bound + 1e-14));
        for (p, m) in field.plus.iter().zip(&field.minus) {
            prop_assert_eq!(*m, p.conj());
        }
    }

    #[test]
    fn phase_and_translation_covariance(seed in 0u64..10_000, shift in 1usize..32) {
        let (grid, modes) = setup(32, 2.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = EffectiveState::new(
            grid.gaussian(&[rng.gen_range(0.0..2.0 * PI)], rng.gen_range(0.5..1.0), &[rng.gen_range(-2.0..2.0)]),
            (0..modes.len()).map(|_| C64::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3))).collect(),
        );
        let integ = SkgIntegrator::new(grid.clone(), modes.clone(), Scheme::Strang).unwrap();
        let base = integ.evolve(&s, 1e-2, 20).unwrap();

        let theta = rng.gen_range(0.0..2.0 * PI);
        let rotated = EffectiveState::new(s.phi.iter().map(|v| v * C64::from_polar(1.0, theta)).collect(), s.alpha.clone());
        let out = integ.evolve(&rotated, 1e-2, 20).unwrap();
        for (a, b) in out.phi.iter().zip(&base.phi) {
            prop_assert!((a - b * C64::from_polar(1.0, theta)).norm() < 1e-10);
        }
        for (a, b) in out.alpha.iter().zip(&base.alpha) {
            prop_assert!((a - b).norm() < 1e-10);
        }

        let a = shift as f64 * grid.spacing();
        let n = s.phi.len();
        let moved = EffectiveState::new(
            (0..n).map(|i| s.phi[(i + n - shift) % n]).collect(),
            (0..modes.len()).map(|j| s.alpha[j] * C64::from_polar(1.0, -modes.mode(j).k[0] * a)).collect(),
        );
        let out = integ.evolve(&moved, 1e-2, 20).unwrap();
        for i in 0..n {
            prop_assert!((out.phi[i] - base.phi[(i + n - shift) % n]).norm() < 1e-10);
        }
        for j in 0..modes.len() {
            prop_assert!((out.alpha[j] - base.alpha[j] * C64::from_polar(1.0, -modes.mode(j).k[0] * a)).norm() < 1e-10);
        }
    }
}
