//! Partial Hamiltonian formalism for finite-dimensional Lagrangians.
//!
//! Given any Lagrangian L(t, q, q̇), the crate computes the Hessian rank,
//! splits coordinates into a canonical sector (with momenta) and a
//! noncanonical sector (without), builds the partial Hamiltonian H0 and the
//! additional Hamiltonians H_alpha, classifies singular dynamics by the rank
//! of the antisymmetric F tensor, and integrates the resulting equations of
//! motion — without ever introducing constraints. Independent oracles
//! (Euler–Lagrange integration, full Hamilton flow, Dirac-constraint
//! reconstruction in an extended phase space) verify the construction.

pub mod brackets;
pub mod dirac;
pub mod dynamics;
pub mod error;
pub mod expr;
pub mod library;
pub mod linalg;
pub mod legendre;
pub mod model;
pub mod multitime;
pub mod report;
pub mod selftest;

pub use error::{Error, Result};
