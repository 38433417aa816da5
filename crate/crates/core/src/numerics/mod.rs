//! Dense numeric kernels every block builds on.

mod ops;
mod svd;
mod tensor;

pub use ops::*;
pub use svd::{svd, SvdResult};
pub use tensor::{AllocProbe, Tensor};
