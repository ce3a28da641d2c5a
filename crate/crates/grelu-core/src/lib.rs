//! Numerical laboratory for gated-ReLU ("GReLU") deep networks.
//!
//! A GReLU network freezes its ReLU open/closed pattern at initialization:
//! the gates are computed from a frozen random auxiliary network and never
//! change while the weight layers train. That makes the per-example network
//! an explicit masked matrix product, so gradients, sub-network factors,
//! tangent kernels and spectral quantities all have closed forms.
//!
//! The crate provides:
//! - [`matrix`], [`rng`], [`linalg`]: the dense `f64` substrate, counter-based
//!   reproducible sampling, spectral extremes and minimal-norm least squares;
//! - [`model`]: network initialization, gate derivation, forward evaluation
//!   and the `F`/`G`/`Z` sub-network factors;
//! - [`train`]: squared loss, closed-form layer gradients, full-batch gradient
//!   descent for both the gated network and a conventional ReLU baseline;
//! - [`theory`]: measurement probes comparing spectral concentration,
//!   cross-example coupling, gate overlap, update decomposition and per-step
//!   descent against their analytic bounds;
//! - [`convert`]: the layer-wise least-squares transform from a gated network
//!   to an ordinary ReLU network with the same training-set footprint;
//! - [`ntk`]: explicit finite-width tangent kernels and perturbation ratios;
//! - [`data`]: synthetic regression data generation and separation checks.

pub mod convert;
pub mod data;
pub mod linalg;
pub mod matrix;
pub mod model;

pub mod ntk;
pub mod rng;
pub mod theory;
pub mod train;

pub use matrix::Matrix;
pub use rng::RngStream;
