//! Asymmetric teacher–student distillation with post-segmentation for
//! unsupervised image anomaly detection.
//!
//! A frozen teacher sees whole images while a trainable student sees
//! non-overlapping patches; their per-position cosine agreement weights the
//! teacher features, and a U-Net style decoder turns the weighted pyramid
//! into a full-resolution anomaly mask.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod patching;
pub mod psm;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod wmb;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, ImageTensor, Tensor};
