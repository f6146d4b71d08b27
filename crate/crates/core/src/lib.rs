//! Mixed finite elements for the regularized p-Stokes equations with
//! nonlinear sliding, plus globalized Newton and Picard iterations.
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches
//! the file system, the wall clock or the command line lives in the
//! `pstokes` companion crate.
//!
//! Module map:
//!
//! * [`kernels`]: pointwise power-law stress, its derivative and the
//!   merit-functional densities.
//! * [`mesh`]: structured triangulations of the glacier and sliding-block
//!   domains with tagged boundaries.
//! * [`fem`]: Taylor-Hood P2-P1 spaces and all assembly routines.
//! * [`linalg`]: CSR storage and a pivoted band LU direct solver.
//! * [`solver`]: Newton and Picard iterations, Armijo and bisection step
//!   sizes, and the Riesz residual norm.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod fem;
pub mod kernels;
pub mod linalg;
pub mod mesh;
pub mod solver;

mod math;

pub use fem::{FemError, MixedSpace, MixedState, PStokesParams};
pub use kernels::{KernelError, Mat2, PowerLaw, Vec2};
pub use linalg::{LinearSolveReport, SolveError, SparseMatrix};
pub use mesh::{BoundaryTag, DomainKind, DomainSpec, Mesh, MeshError};
pub use solver::{IterationRecord, Method, SolveOutcome, SolverConfig, SolverError, Termination};
