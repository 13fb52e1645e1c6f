//! Grids, fields, sparse elliptic operators and norm evaluation.

mod grid;
pub mod io;
mod norms;
mod sparse;

pub use grid::{Grid, ScalarField, SpaceTimeField, TimeGrid};
pub use norms::{
    face_gradient_pairing, gradient_magnitude, gradient_sup_norm, l2_inner, lq_norm,
    lq_norm_values, mixed_norm, nodal_gradient, weighted_spacetime_norm,
    weighted_spacetime_norm_on,
};
pub use sparse::{
    assemble_elliptic, assemble_faces, FaceCoefficients, ShiftedSolver, SparseOperator,
    LINEAR_TOL,
};
