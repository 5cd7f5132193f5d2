//! Factor mixture analysis for multivariate binary data.
//!
//! A logit latent-trait model whose factors follow a finite Gaussian mixture,
//! fitted by generalized EM over Gauss–Hermite quadrature.

pub mod error;
pub mod estimation;
pub mod linalg;
pub mod model;
pub mod par;
pub mod quadrature;
pub mod inference;
pub mod io;
pub mod selection;
pub mod simulation;

pub use error::{Error, Result};
pub use model::{Loadings, MixtureParams, ModelParams, ModelSpec, PatternTable};
