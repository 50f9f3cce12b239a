//! Lightweight referring-segmentation mask decoder.
//!
//! Detail tokens from a vision encoder and semantic tokens from a language
//! model are fused by cross-attention and offset-driven upsampling, then
//! decoded into one mask per segmentation token by a small conv and
//! pixel-shuffle head. Everything runs on a small reverse-mode autodiff
//! tape in double precision.

pub mod ablate;
pub mod autodiff;
pub mod checkpoint;
pub mod decoder;
pub mod dsff;
pub mod error;
pub mod eval;
pub mod export;
pub mod gradcheck;
pub mod gradsuite;
pub mod imageio;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod stub;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
