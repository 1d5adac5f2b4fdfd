//! Gradient-free pruning of multimodal networks.
//!
//! Weights are scored by the information flowing through each edge of a
//! linear layer (input-node emission, edge magnitude and output-node
//! aggregation), layer budgets come from a per-modality magnitude prior, and
//! the result is a set of binary masks written to a single-file tensor
//! container. [`toybench`] provides a small two-tower model with manual
//! backprop to exercise the whole pipeline end to end.

pub mod budgeting;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod masking;
pub mod matrix;
pub mod modelspec;
pub mod pipeline;
pub mod scoring;
pub mod tensorstore;
pub mod toybench;

pub use error::{Error, Result};
