//! Geometric diffusion networks for learning on interdependent instances under
//! distribution shift.

pub mod artifacts;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::Graph;
pub use tensor::Tensor;
