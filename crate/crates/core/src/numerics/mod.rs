//! Array values, reverse-mode gradients, and the optimizer.

mod gemm;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use optim::{clip_global_norm, AdamW, LrSchedule, LrScheduleKind};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
