//! Asymptotic spectral theory and Monte Carlo validation for kernel spectral
//! clustering of high-dimensional Gaussian mixtures.
//!
//! The library predicts, for a mixture model observed through a normalized
//! kernel Laplacian, where the isolated eigenvalues sit, how the associated
//! eigenvectors decompose over the classes (means, fluctuations, alignments),
//! and when classes become undetectable; it also provides the matching
//! simulation, clustering, and kernel-selection machinery used to check the
//! predictions at finite sizes.

pub mod closedform;
pub mod covariance;
pub mod error;
pub mod kernel;
pub mod model;
pub mod rmt;

pub use error::{Error, Result};

