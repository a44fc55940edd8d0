//! Explanation-guided training of a small CNN classifier.
//!
//! The crate bundles a reverse-mode autodiff engine, the classifier, layer-wise
//! relevance propagation (LRP) written on top of the autodiff primitives, a
//! second-order (BiLRP) similarity explanation, deep-kNN retrieval over hidden
//! activations, and a trainer whose loss divides cross-entropy by how much
//! positive relevance lands inside a segmentation mask.

pub mod atlas;
pub mod autodiff;
pub mod bilrp;
pub mod data;
pub mod error;
pub mod harness;
mod io_util;
pub mod lrp;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
