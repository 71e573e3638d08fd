//! Slice-compression + attention-augmented U-Net segmentation of 3D volumes.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, kernels, reverse-mode autodiff, gradient checks.
//! * [`attention`]: MSE block (softmax sSE + depth-wise cSE) and SE/scSE baselines.
//! * [`compression`]: ordered difference images and their learned weighted average.
//! * [`segnet`]: the four network variants, parameter registry, checkpoints.
//! * [`volume`]: volume I/O, anatomical views, samples, k-fold splits, phantoms.
//! * [`train`]: Dice metric/loss, Adam, training loop, evaluation, metrics CSV.

pub mod attention;
pub mod compression;
pub mod error;
pub mod rng;
pub mod segnet;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use segnet::{Batch, ModelConfig, ParamCount, SegNet, Variant};
pub use volume::{Sample, Subject, View, Volume};
pub use tensor::{Graph, Precision, Scalar, Tensor, Var};
