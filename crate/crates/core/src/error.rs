//! Error types shared across the solver.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mesh is not conforming: {0}")]
    NonConformingMesh(String),

    #[error("element path not found in mesh: {0}")]
    UnknownElement(String),

    #[error("point ({0}, {1}) lies outside the computational domain")]
    PointOutsideDomain(f64, f64),

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("local basis construction failed on element {elem}: {reason}")]
    Basis { elem: usize, reason: String },

    #[error("time step underflow: lambda = {lambda:.3e} fell below the floor {floor:.3e}")]
    TimeStepUnderflow { lambda: f64, floor: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
