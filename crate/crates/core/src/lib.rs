//! Conversion of a grouped-query-attention transformer into a hybrid of
//! multi-head latent attention and gated delta-rule linear attention layers.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod gdn;
pub mod hybrid;
pub mod losses;
pub mod mla;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod rope;
pub mod scalar;
pub mod teacher;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::Tensor;
pub use scalar::Scalar;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
