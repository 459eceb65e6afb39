//! Dense linear algebra, activations, simplex normalizers and seeded RNG.
//!
//! Everything is `f64`, and every reduction has a fixed sequential order so
//! that repeated runs are bit-identical.

mod matrix;
mod rng;
mod simplex;

pub use matrix::{dot, matmul, matmul_nt, matmul_tn, Matrix};
pub use rng::{Rng, Stream};
pub use simplex::{
    elu, elu_grad, elu_grad_scalar, elu_scalar, pivot_threshold, softmax, softmax_in_place,
    softmax_jacobian_vp, sparsemax, sparsemax_columns_in_place, sparsemax_in_place,
    sparsemax_jacobian_vp, sparsemax_threshold, ColumnScratch,
};
pub(crate) use simplex::{softmax_jvp_into, sparsemax_jvp_into};
