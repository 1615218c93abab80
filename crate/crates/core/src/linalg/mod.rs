//! Small dense and banded direct solvers.
//!
//! These back the Newton baseline, the exact stage-solve oracle and the
//! direct inner solves of the structured stage solver. Everything is row-major
//! and generic over [`Real`](crate::Real).

mod band;
mod dense;

pub use band::{BandLu, BandMatrix};
pub use dense::{DenseLu, DenseMatrix};
