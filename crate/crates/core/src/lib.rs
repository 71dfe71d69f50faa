//! Homotopy-continuation solver for sequences of quadratic programs over the
//! probability simplex whose quadratic term receives rank-one updates and
//! whose linear term drifts.
//!
//! [`driver::SolverSession`] is the entry point; [`flows`] generates problem
//! sequences and [`baselines`] holds the comparison solvers.

pub mod baselines;
pub mod counters;
pub mod driver;
pub mod error;
pub mod flows;
pub mod kkt;
pub mod linalg;
pub mod path_matrix;
pub mod path_vector;
pub mod state;
pub mod summary;
pub mod tracked;

pub use driver::{run_sequence, SequentialSolver, SolverConfig, SolverSession, StepReport};
pub use error::{Error, Result};
pub use kkt::{oracle_solve, Problem, Quadruple, Support};
