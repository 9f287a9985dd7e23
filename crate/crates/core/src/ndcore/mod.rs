//! Dense tensors, seedable random streams and the matrix products the
//! layers are built on.

mod rng;
mod tensor;

pub use rng::RngStream;
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor};
