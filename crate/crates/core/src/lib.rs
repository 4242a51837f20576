//! Sparse fine-tuning of a small 2D U-Net for few-shot segmentation.
//!
//! The crate contains a reverse-mode autodiff tape over dense `f64` tensors,
//! the U-Net and its parameter registry, the fused cross-entropy + Dice loss,
//! DSC/NSD metrics, synthetic segmentation domains, the per-iteration
//! parameter selection strategies, the training loops, a checksummed
//! checkpoint format and the experiment harness.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod seed;
pub mod sparsify;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{CheckpointError, Error, Result};
pub use tensor::Tensor;
