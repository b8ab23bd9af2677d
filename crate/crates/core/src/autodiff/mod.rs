//! Minimal tape-based reverse-mode differentiation over the tensor
//! operations used by the network, plus the optimizer and gradient
//! verification tooling that desk-scale training needs.

pub mod engine;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod tape;

pub use engine::{Engine, EvalEngine};
pub use optim::{adam_step, AdamConfig, AdamState, CosineSchedule, ParamSet};
pub use tape::{BackwardRule, Gradients, NodeId, Params, Tape};
