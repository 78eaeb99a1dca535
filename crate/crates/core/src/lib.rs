//! Squared deformable alignment for learning super-resolution from
//! misaligned optical-zoom pairs.

pub mod attention;
pub mod checkpoint;
pub mod conv;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod synth;
pub mod tensor;
pub mod train;

pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvParams};
pub use deform::{
    bilinear_sample, deform_conv_backward, deform_conv_forward, upsample_mask, validity_mask,
    DeformGrads, OffsetField, OffsetMode, ValidityMask,
};
pub use error::{Result, SdanError};
pub use tensor::{Real, Shape, Tensor};
