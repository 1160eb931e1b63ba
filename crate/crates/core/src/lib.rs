//! Compositional kernels of infinitely wide Bayesian convolutional networks.
//!
//! The engine computes the Gaussian-process kernels that infinitely wide
//! convolutional, locally connected, and fully connected networks converge
//! to, by iterating two operators on the input covariance: an affine
//! cross-correlation per convolution layer and an entrywise bivariate
//! Gaussian expectation per nonlinearity. Readouts collapse the pixel-indexed
//! top-layer tensor into a sample-by-sample kernel, which feeds exact GP
//! regression with Cholesky solves and a diagonal regularization ladder.
//!
//! Kernels that are too large to propagate analytically (global average
//! pooling needs every pixel-pixel covariance) are estimated by Monte Carlo:
//! instantiate random finite-width networks and average empirical activation
//! covariances, with `M n` draws-times-channels as the effective sample size.
//!
//! Modules:
//! - [`tensor`], [`input`], [`arch`]: covariance containers, input sets, and
//!   architecture hyperparameters.
//! - [`ops`]: the per-layer kernel operators and the variance fixed point.
//! - [`propagate`]: the depth-`L` recursion, readouts, and a pair-streamed
//!   diagonal pipeline for large sample sets.
//! - [`phase`]: large-depth ordered/chaotic phase classification.
//! - [`mc`]: finite-network sampling and Monte Carlo kernel estimates.
//! - [`regress`]: exact GP posterior prediction and the regularization
//!   ladder.
//! - [`data`]: dataset loading, preprocessing, and synthetic generators.

pub mod arch;
pub mod data;
pub mod error;
pub mod input;
pub mod linalg;
pub mod mc;
pub mod ops;
pub mod phase;
pub mod propagate;
pub mod regress;
pub mod tensor;

pub use arch::{
    ArchConfig, Connectivity, LinearPostOp, Nonlinearity, Padding, ReadoutKind, ReadoutSpec,
};
pub use error::{Error, Result};
pub use input::InputSet;
pub use tensor::{ClassKernel, CovDiag, CovFull, ReadoutTag, SpatialShape};
