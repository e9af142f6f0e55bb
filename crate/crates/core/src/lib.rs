//! Missing-value imputation for sensor networks (traffic speed, flow) with a
//! graph-attention + bidirectional-GRU network that predicts a Gaussian mean
//! and variance for every entry.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense 2-D tensors and a reverse-mode tape.
//! - [`graph`]: Gaussian-kernel sensor adjacency.
//! - [`data`]: traffic matrices, missingness masks, normalization, synthetic data.
//! - [`model`], [`loss`], [`train`]: the network, its losses and the Adam loop.
//! - [`baselines`], [`eval`]: classical imputers, metrics and the benchmark grid.
//! - [`checkpoint`], [`config`]: persisted models and run configuration.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor2D;
