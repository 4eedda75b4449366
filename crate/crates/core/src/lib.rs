//! Unsupervised video object segmentation from appearance and optical flow.
//!
//! The network encodes frames and flow maps with one shared encoder, fuses
//! the two streams per stage with a gated co-attention block, mixes
//! information across the frames of a clip with windowed and
//! spatially-reduced attention, and decodes masks with a deep-to-shallow
//! cascade. Everything runs on the small autodiff engine in [`tensor`].

pub mod backbone;
pub mod bfm;
pub mod config;
pub mod ctd;
pub mod error;
pub mod flow;
pub mod imageio;
pub mod model;
pub mod metrics;
pub mod mtt;
pub mod nn;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{no_grad, Scalar, Tensor};
