//! Sparse precision matrices, their factorizations and the block constructors.

pub mod builders;
pub mod cholesky;
pub mod constraint;
pub mod io;
pub mod sparse;

pub use builders::{
    ar1_log_det, build_ar1_precision, build_iid_precision, build_lattice_matern_precision, build_rw1_precision,
    kronecker, kronecker_with_limit,
};
pub use cholesky::{cholesky, CholeskyFactor, JitterPolicy, OrderingKind, Symbolic, SymbolicCache};
pub use constraint::{ConstraintCorrection, LinearConstraints};
pub use sparse::{SparseRows, SparseSymmetric, TripletBuilder};

use crate::error::Result;

/// Draws `mean + L⁻ᵀ z` with `z` from a generator seeded by `seed`.
pub fn sample_gmrf(factor: &CholeskyFactor, mean: &[f64], seed: u64) -> Result<Vec<f64>> {
    factor.sample(mean, seed)
}
