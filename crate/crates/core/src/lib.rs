//! Generalised scalable latent-variable multi-output Gaussian processes.
//!
//! Outputs are embedded as latent vectors `h_{d,q}`; the covariance between
//! `(d, x)` and `(d', x')` is `Σ_q k_q^H(h_{d,q}, h_{d',q}) k_q^X(x, x')`.
//! Inference uses inducing points in both spaces with a whitened
//! Kronecker-structured posterior and a doubly stochastic mini-batch ELBO.

pub mod checkpoint;
pub mod data;
pub mod elbo;
pub mod error;
pub mod inducing;
pub mod kernels;
pub mod kron;
pub mod latent;
pub mod likelihood;
pub mod model;
pub mod predict;
pub mod trainer;

pub use error::{Error, Result};
