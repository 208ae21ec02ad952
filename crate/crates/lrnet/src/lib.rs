//! Lightweight infrared small-target segmentation.
//!
//! This crate implements a complete desk-scale engine around a compact
//! encoder–decoder segmentation network for small infrared targets:
//!
//! * [`tensor`] — dense 4-D NCHW tensors plus the forward/backward kernels
//!   (grouped convolution, max pooling, bilinear upsampling, elementwise maps).
//! * [`nn`] — the layer blocks the network is assembled from (depthwise
//!   separable conv + batch norm + ReLU, efficient channel attention), the
//!   Adam optimizer, and a finite-difference gradient checker.
//! * [`model`] — the network itself: a five-stage dual-branch encoder,
//!   low-level feature injection, skip-path transfer blocks, attention-guided
//!   decoder fusion, parameter/FLOP accounting, and weight-file serialization.
//! * [`loss`] — edge-weighted binary cross-entropy on logits.
//! * [`data`] — PGM image I/O, dataset manifests, random crops, augmentation,
//!   and a deterministic synthetic scene generator.
//! * [`train`] — the mini-batch training loop.
//! * [`infer`] — window tiling and stitched whole-image inference.
//! * [`metrics`] — connected components, detection/segmentation metrics, and
//!   the challenge score that combines them with model cost.
//! * [`config`] — the flat `key=value` run configuration shared by the CLI.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
