//! Interior-point solver for linear programs over products of free,
//! nonnegative and exponential cones.
//!
//! ```text
//! maximize  c^T x   subject to  A x = b,  x in K_1 x ... x K_r
//! ```

mod barrier;
mod cone;
mod kkt;
mod ldl;
mod program;
mod residuals;
mod solver;
mod sparse;

pub use barrier::{
    exp_cone_barrier, in_exp_cone, in_exp_dual_cone, in_exp_dual_interior, in_exp_interior, DomainError,
    ExpBarrier, EXP_CENTRAL_POINT, EXP_CONE_DEGREE,
};
pub use cone::{barrier_degree, ConeBlock};
pub use program::{ConicProgram, DumpError, ValidationIssue, DUMP_VERSION};
pub use residuals::residuals;
pub use solver::{
    solve, ConfigError, ConicSolution, IterationRecord, Residuals, SolveError, SolveStatus, SolverConfig,
};
pub use sparse::{CscMatrix, SparseError};
