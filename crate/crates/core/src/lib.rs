//! Ordinal latent variable models (proportional-odds GLLVM) estimated by
//! full-information maximum likelihood through EM, with classical Laplace,
//! fully exponential Laplace and (adaptive) Gauss-Hermite integration.

#[cfg(feature = "cli")]
pub mod cli;
pub mod em;
pub mod error;
pub mod geometry;
pub mod integrate;
pub mod model;
pub mod parallel;
pub mod quadrature;
pub mod sim;

pub use error::{Error, Result};
pub use integrate::ApproximationMethod;
pub use model::{ItemParams, ModelParams, OrdinalDataset};
