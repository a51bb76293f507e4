//! Dense kernels, the SVD oracle, power iteration and seeded randomness.
//!
//! Everything here is `f64`. The SVD oracle is a one-sided Jacobi
//! implementation that shares no code with the power-iteration path, so the
//! two can check each other.

mod matrix;
mod power;
mod rng;
mod svd;
pub mod vector;

pub use matrix::Matrix;
pub use power::{
    deflated_topk, power_iteration, LinearOperator, PowerIteration, SingularTriple, SpectralState,
};
pub use rng::Rng;
pub use svd::{svd_oracle, SvdResult, SVD_ORACLE_MAX_DIM};
