//! From-scratch 3D segmentation stack built around a multi-head selective
//! state-space mixer. Dense rank-5 volumes, hand-rolled kernels, a tape-based
//! reverse-mode autodiff engine, training/inference drivers and evaluation
//! metrics, with no tensor framework underneath.

pub mod agf;
pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod par;
pub mod params;
pub mod scalar;
pub mod ssm;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use volume::{LabelVolume, Volume5};
