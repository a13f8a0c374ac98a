//! Error taxonomy shared by the whole library.

use num_complex::Complex64;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or sizes that cannot be combined (class sizes vs n, matrix dims vs p, ...).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Structurally invalid input (negative weights, empty classes, bad parameters).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A kernel assumption does not hold (f(tau) = 0, wrong branch for the profile, ...).
    #[error("kernel assumption violated: {0}")]
    Kernel(String),

    /// The fixed-point solver did not reach the required residual.
    #[error("fixed-point solver failed at z = {z}: residual {residual:.3e} after {iterations} iterations")]
    Solver {
        z: Complex64,
        residual: f64,
        iterations: usize,
    },

    /// A kernel degree (row sum of K) is nonpositive, so the Laplacian is undefined.
    #[error("nonpositive kernel degree {value:.6e} at sample index {index}")]
    Degree { index: usize, value: f64 },

    /// Evaluation of the inverse spectral map at one of its poles.
    #[error("pole of the inverse spectral map at g = {g:.6e}")]
    Pole { g: f64 },

    /// Other numerical failures (eigensolver breakdown, singular reduced systems, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
