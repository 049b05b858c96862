use std::f64::consts::PI;

use nalgebra::DMatrix;
use nelson_core::fock::{FockBasis, ModeGrid};
use nelson_core::grid::SpatialGrid;
use nelson_core::indicators::mean_boson_fraction;
use nelson_core::manybody::{product_initial_state, propagate, DenseOracle, Layout, ManyBodyState, NelsonOperator};
use nelson_core::{linalg, Error, C64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

fn operator(particles: usize, n_x: usize, cutoff: f64, mass: f64, n_max: usize, coupled: bool) -> NelsonOperator {
    let grid = SpatialGrid::new(1, 2.0 * PI, n_x).unwrap();
    let mut modes = ModeGrid::new(1, 2.0 * PI, cutoff, mass).unwrap();
    if !coupled {
        modes = modes.decoupled();
    }
    let basis = FockBasis::new(modes.len(), n_max).unwrap();
    NelsonOperator::new(grid, modes, basis, particles).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<C64> {
    let mut v: Vec<C64> = (0..len)
        .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let n = linalg::norm(&v);
    v.iter_mut().for_each(|z| *z /= n);
    v
}

fn kron(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
    DMatrix::from_fn(a.nrows() * b.nrows(), a.ncols() * b.ncols(), |r, c| {
        a[(r / b.nrows(), c / b.ncols())] * b[(r % b.nrows(), c % b.ncols())]
    })
}

/// `−Δ` on `n` periodic nodes of a `2π` box, summed over the momentum lattice.
fn laplacian_matrix(n: usize) -> DMatrix<C64> {
    let dx = 2.0 * PI / n as f64;
    DMatrix::from_fn(n, n, |x, y| {
        let mut s = ZERO;
        for m in 0..n {
            let k = if m <= n / 2 { m as f64 } else { m as f64 - n as f64 };
            s += C64::from_polar(k * k, k * (x as f64 - y as f64) * dx);
        }
        s / n as f64
    })
}

fn annihilator_matrix(basis: &FockBasis, j: usize) -> DMatrix<C64> {
    let f = basis.len();
    DMatrix::from_fn(f, f, |r, c| {
        let (low, high) = (basis.occupation(r), basis.occupation(c));
        let matches = (0..basis.modes()).all(|i| {
            if i == j {
                high[i] == low[i] + 1
            } else {
                high[i] == low[i]
            }
        });
        if matches {
            C64::new((high[j] as f64).sqrt(), 0.0)
        } else {
            ZERO
        }
    })
}

#[test]
fn single_particle_matrix_is_a_kronecker_sum() {
    let op = operator(1, 4, 1.5, 0.0, 2, true);
    let (grid, modes, basis) = (op.grid(), op.modes(), op.basis());
    let f = basis.len();
    let n = grid.nodes();
    let lap = laplacian_matrix(n);
    let mut hf = DMatrix::<C64>::zeros(f, f);
    let mut field = DMatrix::<C64>::zeros(n * f, n * f);
    for j in 0..modes.len() {
        let a = annihilator_matrix(basis, j);
        hf += a.adjoint() * &a * C64::new(modes.omega(j), 0.0);
        for x in 0..n {
            let pos = grid.position(x)[0];
            let phase = C64::from_polar(modes.g(j), modes.mode(j).k[0] * pos);
            let local = &a * phase + a.adjoint() * phase.conj();
            let mut proj = DMatrix::<C64>::zeros(n, n);
            proj[(x, x)] = C64::new(1.0, 0.0);
            field += kron(&proj, &local);
        }
    }
    let expected = kron(&lap, &DMatrix::identity(f, f)) + kron(&DMatrix::identity(n, n), &hf) + field;
    let oracle = DenseOracle::new(&op).unwrap();
    let diff = (oracle.matrix() - expected).iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn dense_matrix_is_hermitian() {
    let op = operator(2, 4, 1.5, 0.0, 2, true);
    let oracle = DenseOracle::new(&op).unwrap();
    assert!(linalg::hermiticity_defect(oracle.matrix()) < 1e-12);
}

#[test]
fn oracle_cap_is_enforced() {
    let op = operator(2, 8, 1.5, 0.0, 10, true);
    assert!(matches!(DenseOracle::new(&op), Err(Error::DimensionAboveCap { .. })));
}

#[test]
fn uncoupled_spectrum_is_a_tensor_sum() {
    let op = operator(1, 4, 1.5, 0.0, 2, false);
    let oracle = DenseOracle::new(&op).unwrap();
    let mut got: Vec<f64> = oracle.eigenvalues().iter().copied().collect();
    got.sort_by(f64::total_cmp);
    let basis = op.basis();
    let mut expected = Vec::new();
    for k2 in [0.0, 1.0, 1.0, 4.0] {
        for b in 0..basis.len() {
            expected.push(k2 + basis.total(b) as f64);
        }
    }
    expected.sort_by(f64::total_cmp);
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn coupling_lowers_the_ground_energy() {
    let free = DenseOracle::new(&operator(1, 4, 1.5, 1.0, 3, false)).unwrap();
    let coupled = DenseOracle::new(&operator(1, 4, 1.5, 1.0, 3, true)).unwrap();
    assert!(free.ground_energy().abs() < 1e-12);
    assert!(coupled.ground_energy() < -1e-3);
}

#[test]
fn free_evolution_is_a_phase() {
    let op = operator(1, 8, 1.5, 1.0, 2, false);
    let (grid, modes, basis) = (op.grid(), op.modes(), op.basis());
    let j = modes.modes().iter().position(|m| m.lattice[0] == 1).unwrap();
    let mut occ = vec![0u16; modes.len()];
    occ[j] = 1;
    let b = basis.index_of(&occ).unwrap();
    let wave = grid.plane_wave(&[1]);
    let mut coeffs = vec![ZERO; op.layout().total()];
    for (x, w) in wave.iter().enumerate() {
        coeffs[x * basis.len() + b] = w * grid.cell_volume().sqrt();
    }
    let psi = ManyBodyState::new(op.layout(), coeffs).unwrap();
    let (out, _) = propagate(&op, &psi, 0.05, 20, 24, 1e-12).unwrap();
    let phase = C64::from_polar(1.0, -(1.0 + modes.omega(j)));
    for (o, p) in out.coeffs().iter().zip(psi.coeffs()) {
        assert!((o - p * phase).norm() < 1e-9);
    }
    assert!((out.time() - 1.0).abs() < 1e-12);
}

#[test]
fn propagation_matches_dense_oracle() {
    let op = operator(1, 8, 1.5, 0.0, 3, true);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let psi = ManyBodyState::new(op.layout(), random_vec(&mut rng, op.layout().total())).unwrap();
    let (out, report) = propagate(&op, &psi, 0.01, 50, 24, 1e-11).unwrap();
    let exact = DenseOracle::new(&op).unwrap().propagate(psi.coeffs(), 0.5);
    assert!(linalg::distance(out.coeffs(), &exact) < 1e-8);
    assert!(report.max_norm_drift < 1e-12);
    assert!(report.energy_drift() < 1e-8);
}

#[test]
fn norm_and_energy_over_many_steps() {
    let op = operator(2, 8, 1.5, 1.0, 3, true);
    let grid = op.grid().clone();
    let phi = grid.gaussian(&[PI], 0.8, &[1.0]);
    let alpha = vec![ZERO; op.modes().len()];
    let (psi, _) = product_initial_state(&phi, &alpha, 2, &grid, op.basis(), 1e-8).unwrap();
    let (out, report) = propagate(&op, &psi, 0.01, 100, 24, 1e-10).unwrap();
    assert!((out.norm_sq() - 1.0).abs() < 1e-9);
    assert!(report.energy_drift() < 1e-8 * report.energy_initial.abs().max(1.0));
    let swapped = out.swap_particles(0, 1);
    assert!(linalg::distance(swapped.coeffs(), out.coeffs()) < 1e-9);
}

#[test]
fn product_state_norm_and_boson_number() {
    let grid = SpatialGrid::new(1, 2.0 * PI, 16).unwrap();
    let basis = FockBasis::new(1, 13).unwrap();
    let phi = grid.gaussian(&[PI], 0.8, &[0.0]);
    let (psi, defect) = product_initial_state(&phi, &[C64::new(0.4, 0.0)], 2, &grid, &basis, 1e-8).unwrap();
    assert!(defect < 1e-8);
    assert_eq!(psi.layout().total(), 256 * 14);
    assert!((psi.norm_sq() - 1.0).abs() < 1e-12);
    let total = 2.0 * mean_boson_fraction(&psi, &basis);
    assert!((total - 0.32).abs() < 1e-8, "{total}");
    let (vac, defect) = product_initial_state(&phi, &[ZERO], 2, &grid, &basis, 1e-8).unwrap();
    assert_eq!(defect, 0.0);
    assert!((vac.norm_sq() - 1.0).abs() < 1e-13);
}

#[test]
fn undersized_truncation_suggests_larger_n_max() {
    let grid = SpatialGrid::new(1, 2.0 * PI, 4).unwrap();
    let basis = FockBasis::new(1, 2).unwrap();
    let phi = grid.gaussian(&[PI], 0.8, &[0.0]);
    let err = product_initial_state(&phi, &[C64::new(2.0, 0.0)], 1, &grid, &basis, 1e-8).unwrap_err();
    match &err {
        Error::TruncationTooSmall { suggested, .. } => assert_eq!(*suggested, 22),
        other => panic!("unexpected {other}"),
    }
    assert!(err.to_string().contains("n_max >= 22"));
}

#[test]
fn unnormalized_orbital_is_rejected() {
    let grid = SpatialGrid::new(1, 2.0 * PI, 4).unwrap();
    let basis = FockBasis::new(1, 2).unwrap();
    let phi = vec![C64::new(1.0, 0.0); 4];
    let err = product_initial_state(&phi, &[ZERO], 1, &grid, &basis, 1e-8).unwrap_err();
    assert!(matches!(err, Error::NotNormalized { .. }));
}

#[test]
fn layout_mismatch_is_rejected() {
    let op = operator(1, 4, 1.5, 0.0, 2, true);
    let layout = Layout {
        particles: 1,
        nodes: 4,
        fock_dim: 3,
    };
    let psi = ManyBodyState::new(layout, vec![C64::new(1.0 / 12f64.sqrt(), 0.0); 12]).unwrap();
    assert!(op.apply(&psi).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn operator_is_symmetric(seed in 0u64..10_000) {
        let op = operator(2, 4, 1.5, 0.0, 2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = op.layout().total();
        let (u, v) = (random_vec(&mut rng, dim), random_vec(&mut rng, dim));
        let mut hu = vec![ZERO; dim];
        let mut hv = vec![ZERO; dim];
        op.apply_raw(&u, &mut hu);
        op.apply_raw(&v, &mut hv);
        prop_assert!((linalg::dot(&u, &hv) - linalg::dot(&hu, &v)).norm() < 1e-10);
    }

    #[test]
    fn exchange_symmetry_is_preserved(seed in 0u64..10_000) {
        let op = operator(2, 4, 1.5, 0.0, 2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = ManyBodyState::new(op.layout(), random_vec(&mut rng, op.layout().total())).unwrap();
        let swapped = raw.swap_particles(0, 1);
        let sym: Vec<C64> = raw.coeffs().iter().zip(swapped.coeffs()).map(|(a, b)| a + b).collect();
        let mut psi = ManyBodyState::new(op.layout(), sym).unwrap();
        psi.normalize();
        let (out, _) = propagate(&op, &psi, 0.05, 4, 24, 1e-10).unwrap();
        prop_assert!(linalg::distance(out.swap_particles(0, 1).coeffs(), out.coeffs()) < 1e-9);
        let hpsi = op.apply(&psi).unwrap();
        prop_assert!(linalg::distance(hpsi.swap_particles(0, 1).coeffs(), hpsi.coeffs()) < 1e-10);
    }
}
