//! Numerical laboratory for the strongly interacting Bose-Hubbard chain.
//!
//! The crate implements, on a truncated Fock space that serves as the matrix
//! oracle, the machinery needed to study transport suppression at high
//! density: a move-decomposed local operator algebra, an iterative
//! quasi-diagonalization of the reduced Hamiltonian, the geometry of
//! resonance zones in occupation space, a smoothed decomposition of the
//! energy current, and Gibbs-measure Monte Carlo together with Heisenberg
//! time evolution.

pub mod cutoff;
pub mod current;
pub mod diagonal;
pub mod error;
pub mod evolve;
pub mod geometry;
pub mod gibbs;
pub mod indicator;
pub mod kam;
pub mod lattice;
pub mod localop;
pub mod matrix;
pub mod moves;
pub mod series;
pub mod suites;
pub mod testing;

pub use error::{Error, Result};
