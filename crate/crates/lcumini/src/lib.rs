//! Desk-scale diffusion transformer for instruction-driven image
//! editing: condition units assembled by channel concatenation, a
//! decomposed flow-matching objective, two-stage training, and a
//! mask-fill Euler sampler, all on a from-scratch autograd core.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod flow;
pub mod lcu;
pub mod model;
pub mod ppm;
pub mod sampler;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{finite_diff_check, Scalar, Tensor};
