//! Adaptive interior-penalty discontinuous Galerkin solver for the linear
//! fourth-order parabolic equation u_t + Δ²u = f on the unit square, with
//! backward Euler time stepping, residual a posteriori error estimators in
//! L∞(L²) and L²(L²), and space-time adaptive drivers.

pub mod error;
pub mod mesh;
pub mod linalg;
pub mod quadrature;
pub mod space;
pub mod forms;
pub mod estimators;
pub mod taylor;
pub mod problems;
pub mod adapt;
pub mod study;
pub mod verify;

pub use error::{Error, Result};
