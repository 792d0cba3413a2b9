//! Reverse-mode differentiation over small dense tensors.
//!
//! The op set is deliberately narrow: what a convolutional back-projection
//! network with windowed attention needs, plus Adam. Kernels are generic over
//! [`Real`] so the same code runs in `f32` for training and `f64` for
//! finite-difference checks.
//!
//! With the default `parallel` feature, per-channel and per-tile loops run on
//! rayon; disable it (or call [`par::set_enabled`]) for a sequential build.

mod adam;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod par;
mod params;
mod real;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{GraphError, Result};
pub use gradcheck::{GradCheck, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore, ParamVars};
pub use real::{gemm, Layout, Real};
pub use tensor::Tensor;
