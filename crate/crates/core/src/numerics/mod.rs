//! Dense f64 tensors, a reverse-mode tape, AdamW and the masked BCE loss.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::ParamStore;
pub use tensor::{matmul, Tensor};

/// Clamp used for `log` inputs and sigmoid outputs.
pub const EPS: f64 = 1e-12;
