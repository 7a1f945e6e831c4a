//! Pure forward (and adjoint) compute kernels over `Volume5`.
//!
//! Everything here is framework-free: plain loops over contiguous slabs,
//! parallelized per output region through `crate::par`. The autodiff tape
//! wraps these functions; tests check them against naive reference loops.

pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod pool;
pub mod resample;
pub mod sobel;

pub use conv::{conv3d, conv3d_backward_input, conv3d_backward_weight, conv3d_out_shape, Conv3dSpec};
pub use sobel::{sobel3d, sobel3d_components, sobel3d_backward};
