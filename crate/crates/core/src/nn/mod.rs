//! Minimal dense-tensor numerical core: tensors, reverse-mode graph, the
//! layer set used by the teacher/student networks, and Adam.

mod adam;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod layers;
mod param;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, Var};
pub use param::{ParamId, ParamSet};
pub use tensor::Tensor;
