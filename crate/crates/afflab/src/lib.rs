//! afflab: thermodynamic-formalism computations for finite and countably
//! infinite affine iterated function systems.
//!
//! The library computes singular value pressure with certified upper/lower
//! brackets, finiteness thresholds, affinity dimensions, entropy and energy of
//! shift-invariant measures, and Gibbs-type equilibrium-state diagnostics.

pub mod linalg;
pub mod systems;
pub mod reducibility;
pub mod potentials;
pub mod pressure;
pub mod measures;
pub mod dimension;
pub mod cli;
