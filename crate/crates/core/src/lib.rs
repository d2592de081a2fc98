//! Latent Gaussian model inference on sparse precision matrices.

pub mod consensus;
pub mod error;
pub mod fusion;
pub mod gmrf;
pub mod hyper;
pub mod laplace;
pub mod likelihood;
pub mod model;
pub mod par;
pub mod recursive;

pub use error::{LgmError, Result};
pub use par::Exec;
