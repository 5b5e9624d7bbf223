//! A miniature structured-grid stencil framework: grid primitives with
//! periodic ghost exchange, an operator-language IR for the 2D Poisson/Jacobi
//! pipeline, lowering to explicit gather/scatter loop stages, fusion into a
//! single per-point kernel, dual executors (unfused reference vs fused), and
//! a C/OpenMP source emitter for the fused kernel.

pub mod emit;
pub mod exec;
pub mod grid;
pub mod lowering;
pub mod ol;
pub mod stencil;

pub use emit::{emit_c_openmp, emit_c_scalar, EmitConfig};
pub use exec::{
    build_fused_program, max_interior_diff, residual_maxnorm, run_fused, run_reference, Backend,
    ProblemConfig, SolveReport,
};
pub use grid::{exchange_ghosts, Box2, BoxData, GridLayout, PatchGrid, Point2};
pub use lowering::{fuse, lower, sigma_eval, FusedProgram, Stage};
pub use ol::{
    build_jacobi_ol, build_laplace_ol, build_maxnorm_ol, build_poisson_ol, ol_eval, ol_shape,
    ol_to_dense, OLExpr, Shape,
};
pub use stencil::{laplacian_5pt, stencil_apply, Stencil};
