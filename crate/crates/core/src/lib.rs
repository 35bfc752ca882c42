//! Gradient-based parameter selection (GPS) at desk scale.
//!
//! The pipeline: rank every input connection of every neuron by the
//! magnitude of a head-free contrastive-loss gradient, keep the top K per
//! neuron, then fine-tune only those weights (plus a fresh classifier head)
//! with masked updates. The resulting task is stored as a sparse overlay on
//! the shared base checkpoint.

pub mod autodiff;
pub mod data;
mod codec;
pub mod error;
pub mod harness;
pub mod masked_train;
pub mod model;
pub mod rng;
pub mod selection;
pub mod sparse_delta;
pub mod tensor;

pub use error::{GpsError, Result};
pub use tensor::Tensor;
