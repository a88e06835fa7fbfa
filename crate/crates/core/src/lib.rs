//! White-balance editing with a shared-encoder, multi-decoder U-Net.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, reverse-mode autodiff, Adam.
//! * [`model`]: the encoder/decoder network and its weight file.
//! * [`synthdata`]: a procedural camera pipeline that renders inputs and ground truth.
//! * [`training`]: the L1 training loop.
//! * [`colormap`]: 11-term polynomial color mapping fitted in closed form.
//! * [`metrics`]: MSE, mean angular error, CIEDE2000 and quartile summaries.
//! * [`pipeline`]: full-resolution editing, temperature blending, evaluation.

pub mod colormap;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Result, WbError};
pub use image::ImageRGB;
