pub mod autograd;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod imgproc;
pub mod network;
pub mod pipeline;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{he_normal, Scalar, Tensor};
