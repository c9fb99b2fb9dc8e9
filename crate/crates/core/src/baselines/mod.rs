//! Reference upsamplers: fixed interpolation and two trainable baselines.

pub mod interp;
pub mod local_implicit;
pub mod resize_conv;

pub use interp::{bicubic_upsample, bilinear_upsample};
pub use local_implicit::{LocalImplicit, LocalImplicitConfig};
pub use resize_conv::{ResizeConv, ResizeConvConfig};
