//! Solver for the anisotropic radiative transfer equation using a mixed
//! even/odd-parity finite element discretization.

pub mod assembly;
pub mod dense;
pub mod eigen;
pub mod error;
pub mod hmatrix;
pub mod kernel;
pub mod operators;
pub mod quadrature;
pub mod solver;
pub mod sparse;
pub mod spatial;
pub mod sphere;

pub use error::{Result, RteError};
