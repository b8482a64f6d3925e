//! Minimal reverse-mode building blocks for the convolutional networks.

mod conv;
mod gemm;
mod params;
mod stack;

pub use conv::{Conv2d, ConvGeometry, ConvTranspose2d};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use stack::{Stage, StageCache};

pub(crate) use params::Initializer;
pub(crate) use stack::{backward_stages, forward_stages, sigmoid};
