//! Tensors, reverse-mode differentiation, Adam and checkpoints.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, grad_check_inputs};
pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, CheckpointFile, GradMap, ParamFile, ParamSet, StoredTensor};
pub use tensor::Tensor;
