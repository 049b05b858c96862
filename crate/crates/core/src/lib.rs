//! Desk-scale laboratory for the mean-field limit of the cutoff Nelson model.
//!
//! * [`fock`]: truncated Fock space over lattice field modes.
//! * [`grid`]: periodic spatial grid and spectral derivatives.
//! * [`manybody`]: the N-particle Nelson Hamiltonian, matrix-free, with a
//!   Lanczos propagator and a dense oracle.
//! * [`effective`]: the discrete Schrödinger–Klein–Gordon system.
//! * [`indicators`]: β functionals, reduced density matrices, trace
//!   distances and exact time-derivative formulas.
//!
//! Conventions: a many-body coefficient array is stored in the orthonormal
//! lattice basis (`Σ|c|² = 1`), while one-particle orbitals `φ` are grid
//! values normalized with the `Δx^d` weight. The orthonormal slot vector of
//! `φ` is `φ √(Δx^d)`.

pub mod effective;
pub mod error;
pub mod fock;
pub mod grid;
pub mod indicators;
pub mod krylov;
pub mod linalg;
pub mod manybody;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
