//! One shared encoder/decoder behind multiple convolutional subsampling
//! branches. A single model is trained with per-batch random branch
//! selection and serves any configured subsampling rate at inference time.
//!
//! The crate is organized around the pipeline:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode differentiation
//! - [`frontend`]: the multi-branch subsampling frontend
//! - [`model`]: shared encoder, bidirectional decoder, projection heads
//! - [`objectives`]: CTC loss, label-smoothed KL loss, weighted total
//! - [`decoding`]: greedy search, prefix beam search, attention rescoring
//! - [`training`]: branch-selective training loop and weight transfer
//! - [`data`], [`checkpoint`], [`config`]: file formats
//! - [`bench`], [`projection`], [`eval`]: measurement and analysis tools

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model;
pub mod objectives;
pub mod projection;
pub mod tensor;
pub mod tokens;
pub mod training;

pub use error::{HydraError, Result};
