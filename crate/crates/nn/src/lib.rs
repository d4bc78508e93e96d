//! Minimal reverse-mode autodiff over dense 5D tensors, sized for small
//! volumetric convolutional networks on a CPU.
//!
//! Everything is generic over [`Real`], so the same network code trains in
//! `f32` and is gradient-checked in `f64`.

pub mod gradcheck;
mod graph;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
mod real;
mod tensor;

pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use ops::{concat_channels, ConvGeometry};
pub use params::{Bound, ParamId, ParamStore};
pub use real::{gemm, gemm_strided, DType, Real, Strides};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
