//! Finite-volume solver for entropy-dissipating cross-diffusion systems
//!
//! ```text
//! ∂t u_i = div(δ ∇u_i + u_i ∇p_i),   p_i = Σ_j a_ij u_j,
//! ```
//!
//! with no-flux boundaries, on admissible two-dimensional meshes.

// Negated comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod cli;
pub mod diagnostics;
pub mod mesh;
pub mod model;
pub mod scheme;
pub mod solver;
pub mod sparse;
