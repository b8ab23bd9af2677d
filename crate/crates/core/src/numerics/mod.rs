//! Dense real/complex tensors and the primitive signal operations the rest
//! of the toolkit builds on: centered 2-D DFT, reflect padding, depthwise
//! separable 1-D convolution, and bilinear resampling.
//!
//! All operations are pure functions of their inputs; values are immutable
//! once constructed and safe to share across threads.

mod complex;
mod dft;
mod ops;
mod tensor;

pub use complex::ComplexImage;
pub use dft::dft2_centered;
pub use ops::{
    bilinear_resize, bilinear_resize_adjoint, depth_to_space, reflect_pad, reflect_pad_adjoint,
    sep_conv1d, sep_conv1d_adjoint, sep_conv1d_madds, space_to_depth, Axis,
};
pub use tensor::{Dtype, Scalar, Tensor};
