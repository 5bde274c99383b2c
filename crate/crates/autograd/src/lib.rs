//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The tape ([`Graph`]) records a fixed set of operations used by small
//! convolutional denoisers with cross-attention. Everything is generic over
//! [`Scalar`] so the same network can be trained in `f32` and checked
//! against finite differences in `f64`.

mod graph;
mod kernels;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::attention::ColumnOverride;
pub use optim::Adam;
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, Error>;
