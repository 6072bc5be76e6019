//! Joint architecture and mixed-precision quantisation search for graph
//! neural networks.
//!
//! Layout:
//! - [`autodiff`]: reverse-mode tape over dense and per-edge tensors.
//! - [`quant`]: fixed-point, binary and ternary fake quantisers and the 17-row search space.
//! - [`graph`]: datasets, preprocessing, splits, sampling and metrics.
//! - [`supernet`]: searchable graph blocks, shortcut router, sizes and checkpoints.
//! - [`nas`]: controllers, noise schedule, quantisation loss and the search loop.
//! - [`harness`]: experiment commands shared by the CLI.

pub mod autodiff;
pub mod error;
pub mod graph;
pub mod harness;
pub mod nas;
pub mod quant;
pub mod supernet;

pub use error::{Error, Result};
