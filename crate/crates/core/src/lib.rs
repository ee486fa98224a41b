//! Risk-sensitive stochastic optimal control toolkit.
//!
//! Solves a linear-quadratic risk-sensitive factor-model portfolio problem
//! by two independent routes (adjoint equations and the HJB value function),
//! then checks numerically that the routes agree and that the relations
//! linking adjoints, generalized Hamiltonian and value function hold.

pub mod config;
pub mod error;
pub mod gridfn;
pub mod hamiltonians;
pub mod lq_coeffs;
pub mod portfolio;
pub mod risk_cost;
pub mod sde_mc;

pub use error::{Error, Result};

/// Deterministic number formatting for every emitted artifact:
/// scientific notation with 17 significant digits.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}
