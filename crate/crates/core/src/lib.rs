//! Residual encoder-decoder networks for seismic facies segmentation.
//!
//! The crate carries its own small deep-learning stack: NHWC tensors, a
//! reverse-mode tape, im2col convolutions and their transposes, batch
//! norm, residual and transposed residual units. Around it sit the data
//! pipeline (volumes, splits, tiles), RMSProp training with checkpoints,
//! and tiled mIOU evaluation.

mod error;

pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod nn;
pub mod tensor;
pub mod topology;
pub mod train;

pub use error::{Error, Result};
