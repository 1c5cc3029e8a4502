//! Dense f64 tensors, reverse-mode autodiff, and the portable RNG.

pub mod graph;
pub mod io;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use graph::{Graph, NodeId};
pub use io::{read_dgft, write_dgft};
pub use rng::RngState;
pub use tensor::Tensor;
