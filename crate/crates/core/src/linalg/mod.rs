//! Dense linear algebra and small statistics helpers.

mod matrix;
mod stats;
mod svd;

pub use matrix::{frobenius_norm, matmul, Matrix};
pub(crate) use matrix::matmul_f64;
pub use stats::{fractional_ranks, mean, pearson, sample_std, softmax, spearman, standard_error};
pub use svd::{thin_svd, top_singular_value, SvdResult};
pub(crate) use svd::svd_f64;
