//! Random-matrix spectral analysis and pruning of dense weight matrices.
//!
//! The pieces, bottom up:
//! - [`linalg`]: the row-major [`RealMatrix`] and faer-backed products and SVDs.
//! - [`matrixio`]: PMAT/IDX/CSV files and model checkpoints.
//! - [`rmt`]: the Marchenko–Pastur law, BEMA edge estimation, layer metrics
//!   and the D-transform.
//! - [`spiked`]: planted low-rank-plus-noise matrices and their predicted
//!   singular values and overlaps.
//! - [`nn`]: a small MLP with manual backpropagation.
//! - [`prune`]: magnitude, singular-vector and MP singular-value pruning and
//!   the multi-cycle pipeline.
//! - [`theory`]: runnable checks of the output-perturbation and
//!   loss-reduction bounds.
//! - [`regression`]: the Fourier-feature regression comparison.

pub mod error;
pub mod linalg;
pub mod matrixio;
pub mod nn;
pub mod prune;
pub mod regression;
mod quad;
pub mod rmt;
pub mod rng;
pub mod spiked;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::RealMatrix;
