//! Dual-path network for joint mass segmentation and classification of
//! image regions, built on a small reverse-mode autodiff engine.
//!
//! The texture path stacks residual depthwise-separable convolution blocks
//! over a context-padded region; the segmentation path runs a residual
//! U-Net, refines its per-pixel probabilities with dense-CRF mean-field
//! inference, and classifies the resulting soft mask. A fused head
//! classifies the concatenated features of both paths.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the two instantiations.

pub mod autodiff;
pub mod commands;
pub mod config;
pub mod crf;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use kernels::Padding;
pub use rng::Rng;
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
