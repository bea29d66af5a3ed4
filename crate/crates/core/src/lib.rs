//! Reduced-order tube dynamics for a finite-horizon quadratic mean-field game.
//!
//! The crate is `no_std` (with `alloc`) and holds all numerics: the 4D
//! Hamiltonian moment model, its flow and variational equations, the
//! equilibrium and eigenbasis analysis, periodic orbits and their tubes,
//! the two-point boundary value solver with continuation, and the
//! finite-difference Picard solver for the full planning problem.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod dop853_tableau;

pub mod bvp;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod orbits;
pub mod pde;
pub mod spectral;

pub use error::{Error, Result};
pub use model::{EnergyBreakdown, LagrangianState, ModelParams, PhaseState};
