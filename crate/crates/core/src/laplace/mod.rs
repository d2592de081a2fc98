//! Nested Laplace approximation: Gaussian approximations, hyperparameter
//! exploration, marginals and the one-shot fit.

pub mod approx;
pub mod explore;
pub mod fit;
pub mod marginals;
pub mod output;

pub use approx::{gaussian_approximation, log_hyper_posterior, GaussianApprox, NewtonOptions};
pub use explore::{explore_hyperparameters, explore_hyperparameters_with, find_mode, EngineConfig, HyperGrid, Strategy};
pub use fit::{fit, fit_on_grid, FitOutput, PosteriorSummary};
pub use marginals::{hyper_marginals, latent_marginals, DensityGrid, HyperMarginal, LatentMarginal};
