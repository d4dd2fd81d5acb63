//! Reverse-mode differentiation over the handful of operations the
//! classifier needs.

pub mod kernels;
mod param;
mod tape;

pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{backward, Activation, Gradients, Tape, Var, PROB_CLAMP};
