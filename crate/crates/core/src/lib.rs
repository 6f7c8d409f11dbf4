//! Three-stream boundary-aware pavement segmentation: data, network, losses,
//! metrics and training.

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod taxonomy;
pub mod training;

pub use error::{Error, Result};
pub use tbnet_tensor as tensor;
