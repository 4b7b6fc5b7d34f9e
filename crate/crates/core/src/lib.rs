//! Curvature laboratory for linear weight-sharing layers.
//!
//! Builds exact block-diagonal Gauss-Newton/Fisher oracles for a small
//! zoo of weight-sharing layers (dense chains, self-attention,
//! unfolded convolution, graph blocks), the expand and reduce flavours
//! of Kronecker-factored curvature over those layers, a preconditioned
//! trainer, and a Kronecker Laplace routine for per-layer weight-decay
//! selection.

pub mod curvature;
pub mod error;
pub mod kfac;
pub mod net;
pub mod rng;
pub mod scenarios;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{SymEig, Tensor};
