//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! The pieces fit together as: [`params::ParamStore`] owns the trainable
//! tensors, [`graph::Graph`] records a forward pass as a tape and replays
//! it in reverse, [`ops`] and [`batchnorm`] hold the raw kernels, and the
//! resulting [`params::Grads`] feed [`params::ParamStore::sgd_step`].

pub mod batchnorm;
pub mod graph;
pub mod ops;
pub mod params;

pub use batchnorm::BnStats;
pub use graph::{sigmoid, Graph, NodeId};
pub use params::{Grads, ParamId, ParamStore};
