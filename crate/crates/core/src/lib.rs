//! Unsupervised disentanglement with GANs.
//!
//! The training loop alternates uniform and one-hot control-vector sampling,
//! uses a generator whose input block lets the control vector `c` own the
//! coarse content while noise `z` only enters through a `c`-driven mask, and
//! regularizes a grouped-convolution code extractor toward mutually orthogonal
//! kernels. The [`metrics`] module holds the evaluation suite.

pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod data;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod trainer;
pub mod viz;

pub use candle_core::{DType, Device};
pub use error::{Error, Result};
