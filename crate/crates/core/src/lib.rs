//! Neural architecture construction over envelope networks.
//!
//! The crate trains over-provisioned convolutional networks for short,
//! truncated runs, ranks their parallel filters by featuremap statistics,
//! and iteratively restructures the network by pruning weak filters and
//! appending fresh envelope cells. Everything numeric is generic over the
//! scalar type: `f32` for training builds, `f64` where verification needs
//! the headroom.

pub mod error;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
