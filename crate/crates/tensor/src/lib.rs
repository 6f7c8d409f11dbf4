//! Dense `f64` tensors, convolution kernels and a tape-based reverse-mode
//! differentiator, sized for a three-stream segmentation network.
//!
//! The hot loops run over a rayon pool when the `parallel` feature is on
//! (the default) and sequentially otherwise; see [`par`].

pub mod conv;
mod error;
pub mod graph;
pub mod linalg;
pub mod par;
pub mod pool;
pub mod resize;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{sigmoid, BatchStats, Gradients, Graph, Var};
pub use tensor::Tensor;
