//! Bayesian parameter estimation with uncertainty quantification for a
//! closed-loop 0D cardiovascular model.
//!
//! The library couples a twelve-state lumped-parameter circulation model with
//! a pluggable left-ventricle surrogate (a built-in time-varying elastance
//! law or a loaded feedforward network) and provides the full estimation
//! stack on top of it:
//!
//! - adaptive Dormand–Prince 5(4) integration with dense output and a
//!   limit-cycle protocol ([`ode`]),
//! - quantity-of-interest extraction and the multi-term fitting cost
//!   ([`qoi`]),
//! - adjoint gradients of trace objectives with a finite-difference oracle
//!   ([`adjoint`]),
//! - bounded L-BFGS MAP estimation with multistart ([`map_estimate`]),
//! - NUTS Hamiltonian Monte Carlo with a Gaussian-process model of the
//!   reduced-order-model error ([`hmc`]),
//! - Saltelli/Sobol global sensitivity analysis ([`sensitivity`]),
//! - twin-experiment orchestration and report emission ([`harness`]).
//!
//! All stochastic components are seeded explicitly; fixed seeds reproduce
//! results bit-identically in single-threaded mode.

pub mod adjoint;
pub mod circulation;
pub mod coupled;
pub mod error;
pub mod harness;
pub mod hmc;
pub mod map_estimate;
pub mod ode;
pub mod params;
pub mod qoi;
pub mod sensitivity;
pub mod surrogate;

pub use error::{Error, Result};
pub use params::{ParamId, ParameterSet, ParameterVector};
