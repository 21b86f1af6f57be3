//! Minimal dense-tensor engine: tensors, a reverse-mode tape, Adam, and a
//! finite-difference gradient checker.
//!
//! Tensors are immutable once recorded on a tape; each training run owns a
//! private `Graph`. Training runs in `f32`; the same generic code is
//! instantiated with `f64` for gradient checks.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use gradcheck::{check_all_ops, max_rel_error};
pub use graph::{Graph, NodeId, Op};
pub use optim::{AdamConfig, OptimizerState};
pub use tensor::{Dtype, Scalar, Tensor};
