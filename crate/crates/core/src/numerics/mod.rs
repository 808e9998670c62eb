//! Dense tensors, reverse-mode differentiation, Adam and the tri-stage schedule.

mod graph;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, ParamId, Reduction, Segment, Var};
pub use optim::{adam_step, clip_grad_norm, OptimState, ParamStore, TriStageLR};
pub use tensor::Tensor;
