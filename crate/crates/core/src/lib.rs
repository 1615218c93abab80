//! Matrix-free double-layer Jacobi solvers for PDE-constrained nonlinear model
//! predictive control.

// `!(a < b)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod bench;
pub mod checks;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod instances;
pub mod linalg;
pub mod lower;
pub mod newton;
pub mod ocp;
pub mod parallel;
pub mod pde;
pub mod upper;
mod scalar;
pub mod spectral;

pub use dynamics::{DenseDynamics, Dynamics, HessEntry, Linearization, RowPattern};
pub use error::{Error, Result};
pub use pde::{discretize, Coefficient, DiscretizedSystem, PdeModel, SpatialGrid};
pub use scalar::Real;
pub(crate) use scalar::{dot, norm2, norm_inf};

/// Double-precision problem on the default cost and input box.
pub type Problem = ocp::OcpProblem<f64>;
pub type Trajectory = ocp::Trajectory<f64>;
pub type Stages = upper::StageSet<f64>;
pub type Newton = newton::NewtonSolver<f64>;
pub type Operator = spectral::IterationOperator<f64>;

/// Single-precision counterparts.
pub type ProblemF32 = ocp::OcpProblem<f32>;
pub type TrajectoryF32 = ocp::Trajectory<f32>;
