//! Dense tensors, a reverse-mode tape over a fixed operation set, and a
//! finite-difference gradient checker.
//!
//! The operation set is deliberately small: matrix products, 3x3
//! convolution (stride 1 or 2), nearest-neighbour upsampling,
//! concatenation and slicing, elementwise arithmetic with the broadcasts a
//! U-Net needs, group/layer normalization, SiLU, masked row softmax,
//! embedding lookup and mean/sum/squared-error reductions.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamSet;
pub use tensor::{Float, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("function is not deterministic: evaluated to {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
