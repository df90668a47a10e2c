#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Modified Patankar linear multistep (MPLM) methods for positive,
//! conservative production-destruction systems.
//!
//! A production-destruction system `y' = (P(y) - D(y)) e` is integrated by
//! linearly implicit multistep schemes whose system matrix is an M-matrix
//! for every step size, so the numerical solution stays positive and keeps
//! `e^T y` constant.
//!
//! ```
//! use mplm_core::{integrate, problems};
//!
//! let problem = problems::linear_test();
//! let traj = integrate(&problem, "mplm-4-3", 1.0 / 32.0, None).unwrap();
//! assert!(traj.summary.min_component > 0.0);
//! assert!(traj.relative_mass_residual() < 1e-14);
//! ```

pub mod coefficients;
pub mod error;
pub mod harness;
pub mod integrator;
pub mod linsolve;
pub mod matrix;
pub mod pds;
pub mod problems;

pub use coefficients::{catalog, method, validate_order_conditions, LmCoefficients, MethodLadder};
pub use error::{Error, LinsolveError, Result};
pub use integrator::{
    compute_pwd_ladder, integrate, mpe_step, mplm_step, startup, Integrator, IntegratorOptions,
    PwdStrategy, StepHistory, Trajectory,
};
pub use matrix::{Matrix, Structure};
pub use pds::{check_conservativity, eval_pd, rhs, PdsProblem, ProductionDestruction};
