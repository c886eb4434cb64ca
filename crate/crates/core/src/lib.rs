//! Slice-sequence segmentation engine.
//!
//! The crate trains and evaluates compact convolutional segmenters on
//! volumetric scans that are processed as ordered stacks of 2D slices:
//!
//! * [`autodiff`]: dense-tensor reverse-mode differentiation with the
//!   handful of operators the models need.
//! * [`network`]: a deeply supervised encoder with per-resolution side
//!   outputs fused by a learned 1x1 convolution.
//! * [`losses`]: an overlap-direct training loss with an analytic
//!   gradient, plus cross-entropy baselines.
//! * [`clstm`]: a convolutional LSTM that regularizes each slice's
//!   prediction with the preceding slices.
//! * [`metrics`]: Dice and Jaccard scoring with threshold sweeps.
//! * [`data`]: volume file I/O, synthetic dataset generation, and fold
//!   planning for cross-validation.
//! * [`trainer`]: the two-phase training protocol and evaluation drivers.
//! * [`cli`]: the command-line interface over all of the above.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod clstm;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
