//! Dense tensors, reverse-mode differentiation and the numeric kernels
//! (convolution, bicubic resampling) everything else is built on.

mod array;
pub mod conv;
mod gradcheck;
pub mod resample;
mod tape;

pub use array::Tensor;
pub use conv::ConvGeometry;
pub use gradcheck::{analytic_gradient, grad_check, numeric_gradient, relative_error, RELATIVE_ERROR_FLOOR};
pub use resample::{bicubic_resample_2d, resample_axis, resample_planes, Alignment};
pub use tape::{inject_conv2d_backward_fault, Gradients, Tape, Var};
