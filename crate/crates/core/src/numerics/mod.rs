//! Numeric kernel: dense linear algebra, quasi-Newton maximization,
//! Gaussian quadrature, root finding and reproducible random streams.

pub mod linalg;
pub mod optim;
pub mod quadrature;
pub mod rng;
pub mod roots;

use thiserror::Error;

pub use linalg::{cholesky, cholesky_psd, invert_information, invert_information_pruning, Cholesky, Matrix, SpdMatrix};
pub use optim::{maximize, maximize_with, Objective, OptimOptions, OptimResult, WithGradient};
pub use quadrature::{gauss_hermite, gauss_legendre, hermite_grid, UnitRule};
pub use rng::{draw_normal, RngStream};
pub use roots::brent_root;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not positive definite (pivot {pivot} non-positive)")]
    NotPositiveDefinite { pivot: usize },
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("objective is not finite at the starting point")]
    NonFiniteStart,
    #[error("no sign change on [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },
}
