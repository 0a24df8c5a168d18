//! Semantic segmentation with learnable divisive normalization.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below name the common concrete types.

pub mod bio;
pub mod data;
pub mod divnorm;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod metrics;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod unet;

pub use divnorm::{dn_backward, dn_forward, DnGrads, DnParams};
pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
pub use unet::{build_model, model_backward, model_forward, DnVariant, Gradients, UNet, UNetConfig};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type DnParams64 = DnParams<f64>;
pub type DnParams32 = DnParams<f32>;
pub type UNet64 = UNet<f64>;
pub type UNet32 = UNet<f32>;
